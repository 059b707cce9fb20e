"""Meta-learning over a task collection.

Inner episodes run the leave-one-out ratio objective for one task with
mixture weights taken from the meta-knowledge. The outer loop adjusts the
mixture logits with a two-evaluation simultaneous-perturbation (SPSA)
estimate of the meta-loss gradient; nothing is differentiated through the
inner training.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import softmax

from .dists import TaskCollection, as_seed, check_simplex
from .div import DivergenceConfig, param_divergence
from .errors import ConfigurationError, ContractViolation, NumericalError
from .gens import LayeredGenerator, LayerSet, ParamVector, interpolate_params
from .objectives import (Guards, ObjectiveSpec, Term, TrainConfig, eval_ratio, ratio_spec,
                         train_param_divergence, train_ratio)

AGGREGATIONS = ("mean", "min")
JOINT_MAX_TASKS = 8


@dataclass(frozen=True, eq=False)
class MetaKnowledge:
    """Outer-loop state: mixture logits (``omega = softmax(logits)``), the
    trainable layer set (``None`` means every layer) and the outer step count."""

    omega_logits: np.ndarray
    lambda_choice: LayerSet | None = None
    outer_step: int = 0

    def __post_init__(self):
        v = np.array(self.omega_logits, dtype=np.float64).ravel()
        if v.size < 1 or not np.all(np.isfinite(v)):
            raise ContractViolation("omega_logits must be a nonempty finite vector")
        v.setflags(write=False)
        object.__setattr__(self, "omega_logits", v)

    @classmethod
    def uniform(cls, n_tasks: int, lambda_choice: LayerSet | None = None) -> "MetaKnowledge":
        return cls(np.zeros(n_tasks), lambda_choice)

    @property
    def omega(self) -> np.ndarray:
        return softmax(self.omega_logits)

    def lambda_label(self) -> str:
        return "all" if self.lambda_choice is None else str(self.lambda_choice)


@dataclass(frozen=True)
class EpisodeConfig:
    inner_steps: int = 100
    tasks_per_outer: int = 1
    outer_steps: int = 20
    perturbation: float = 0.1
    outer_lr: float = 0.1
    aggregation: str = "mean"
    joint: bool = False
    normalize: bool = True

    def __post_init__(self):
        if self.inner_steps < 0:
            raise ConfigurationError("inner_steps must be >= 0")
        if self.tasks_per_outer < 1 or self.outer_steps < 1:
            raise ConfigurationError("tasks_per_outer and outer_steps must be >= 1")
        if self.perturbation < 0 or self.outer_lr < 0:
            raise ConfigurationError("perturbation and outer_lr must be >= 0")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigurationError(f"aggregation must be one of {AGGREGATIONS}")


@dataclass
class EpisodeResult:
    task: int
    generator: LayeredGenerator
    ratio: float
    initial_ratio: float
    numerator: float
    denominator: float


def inner_episode(i: int, gen_init: LayeredGenerator, meta: MetaKnowledge, tasks: TaskCollection,
                  spec: ObjectiveSpec | None, cfg: EpisodeConfig, train: TrainConfig | None = None) -> EpisodeResult:
    """Ratio training for task ``i`` with leave-one-out weights from ``softmax(logits)``."""
    if len(tasks) < 2:
        raise ConfigurationError("meta-learning needs at least two tasks")
    if meta.omega_logits.size != len(tasks):
        raise ContractViolation("one logit per task is required")
    train = replace(train or TrainConfig(), steps=cfg.inner_steps)
    omega = meta.omega
    spec = spec or ratio_spec()
    cfgs = _ratio_cfgs(spec)
    if cfg.inner_steps == 0:
        num, den, r = eval_ratio(gen_init, tasks, i, cfgs, train.n_eval, train.seed + 104729, omega)
        return EpisodeResult(i, gen_init, r, r, num, den)
    res = train_ratio(gen_init, tasks, i, spec, train=train, omega=omega, trainable_layers=meta.lambda_choice)
    f, s = res.final, res.initial
    return EpisodeResult(i, res.generator, f["ratio"], s["ratio"], f["numerator"], f["denominator"])


def _ratio_cfgs(spec: ObjectiveSpec) -> tuple[DivergenceConfig, DivergenceConfig]:
    num = next(t.divergence for t in spec.terms if t.domain == "data" and t.direction == "max")
    den = next(t.divergence for t in spec.terms if t.domain == "data" and t.direction == "min")
    return num, den


def meta_loss(results: Sequence[EpisodeResult], aggregation: str = "mean") -> float:
    """Negated mean (or worst-case) achieved ratio."""
    if not results:
        raise ContractViolation("no episode results")
    r = np.array([e.ratio for e in results])
    return float(-(r.mean() if aggregation == "mean" else r.min()))


@dataclass(frozen=True)
class OuterPlan:
    """Random choices of one outer step: sampled tasks, the Rademacher
    direction and the inner-training seed shared by both evaluations."""

    task_ids: tuple[int, ...]
    delta: np.ndarray
    train_seed: int


def plan_outer_step(meta: MetaKnowledge, n_tasks: int, cfg: EpisodeConfig, seed) -> OuterPlan:
    rng = np.random.default_rng([as_seed(seed), meta.outer_step])
    if cfg.joint:
        if n_tasks > JOINT_MAX_TASKS:
            raise ConfigurationError(f"joint optimization supports at most {JOINT_MAX_TASKS} tasks")
        ids = tuple(range(n_tasks))
    else:
        m = min(cfg.tasks_per_outer, n_tasks)
        ids = tuple(int(i) for i in np.sort(rng.choice(n_tasks, m, replace=False)))
    delta = rng.choice([-1.0, 1.0], size=n_tasks)
    return OuterPlan(ids, delta, int(rng.integers(2**63)))


def outer_step(meta: MetaKnowledge, plus: Sequence[EpisodeResult], minus: Sequence[EpisodeResult],
               delta, cfg: EpisodeConfig) -> MetaKnowledge:
    """SPSA update of the logits from episodes run at ``logits +/- c * delta``.

    ``g = (L+ - L-) / (2c) * delta``; ``logits <- logits - outer_lr * g``.
    With ``cfg.normalize`` the difference is divided by ``(|L+| + |L-|) / 2``
    (ratios span orders of magnitude). A zero perturbation scale leaves the
    logits unchanged.
    """
    lp, lm = meta_loss(plus, cfg.aggregation), meta_loss(minus, cfg.aggregation)
    if not (math.isfinite(lp) and math.isfinite(lm)):
        raise NumericalError("non-finite meta-loss")
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != meta.omega_logits.shape:
        raise ContractViolation("delta must match the logits")
    logits = meta.omega_logits
    if cfg.perturbation > 0:
        diff = lp - lm
        if cfg.normalize and diff != 0.0:
            diff /= 0.5 * (abs(lp) + abs(lm))
        g = diff / (2.0 * cfg.perturbation) * delta
        logits = logits - cfg.outer_lr * g
    if not np.all(np.isfinite(logits)):
        raise NumericalError("meta update produced non-finite logits")
    return MetaKnowledge(logits, meta.lambda_choice, meta.outer_step + 1)


def _run_episodes(ids, gen_init, meta, tasks, spec, cfg, train, pool):
    jobs = [(i, m) for m in meta for i in ids]
    if pool is None:
        out = [inner_episode(i, gen_init, m, tasks, spec, cfg, train) for i, m in jobs]
    else:
        out = list(pool.map(lambda im: inner_episode(im[0], gen_init, im[1], tasks, spec, cfg, train), jobs))
    k = len(ids)
    return [out[j * k:(j + 1) * k] for j in range(len(meta))]


@dataclass
class MetaTraceRow:
    outer_step: int
    omega: list[float]
    lambda_choice: str
    meta_loss: float


@dataclass
class MetaResult:
    meta: MetaKnowledge
    generators: list[LayeredGenerator]
    trace: list[MetaTraceRow] = field(default_factory=list)
    initial_ratios: list[float] = field(default_factory=list)
    final_ratios: list[float] = field(default_factory=list)

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["outer_step", "omega", "lambda_choice", "meta_loss"])
        for r in self.trace:
            w.writerow([r.outer_step, json.dumps([float(x) for x in r.omega]), r.lambda_choice, repr(r.meta_loss)])
        return buf.getvalue()


def run_meta(tasks: TaskCollection, gen_init: LayeredGenerator, spec: ObjectiveSpec | None = None,
             cfg: EpisodeConfig | None = None, seed=0, meta: MetaKnowledge | None = None,
             train: TrainConfig | None = None, jobs: int = 1, final_episodes: bool = True) -> MetaResult:
    """Alternate inner episodes and SPSA outer steps for ``cfg.outer_steps`` steps.

    Each outer step runs the sampled tasks' episodes at ``logits + c*delta`` and
    ``logits - c*delta`` with identical inner seeds, logs the mean of the two
    meta-losses, then updates the logits. When ``final_episodes`` is set, one
    more episode per task at the final weights yields the per-task generators.
    """
    cfg = cfg or EpisodeConfig()
    if len(tasks) < 2:
        raise ConfigurationError("meta-learning needs at least two tasks")
    meta = meta or MetaKnowledge.uniform(len(tasks))
    if meta.lambda_choice is not None:
        meta.lambda_choice.check(gen_init.layout)
    train = train or TrainConfig()
    spec = spec or ratio_spec()
    pool = ThreadPoolExecutor(max_workers=jobs) if jobs > 1 else None
    try:
        trace = []
        for _ in range(cfg.outer_steps):
            plan = plan_outer_step(meta, len(tasks), cfg, seed)
            c = cfg.perturbation
            mp = MetaKnowledge(meta.omega_logits + c * plan.delta, meta.lambda_choice, meta.outer_step)
            mm = MetaKnowledge(meta.omega_logits - c * plan.delta, meta.lambda_choice, meta.outer_step)
            t = replace(train, seed=plan.train_seed)
            plus, minus = _run_episodes(plan.task_ids, gen_init, [mp, mm], tasks, spec, cfg, t, pool)
            loss = 0.5 * (meta_loss(plus, cfg.aggregation) + meta_loss(minus, cfg.aggregation))
            meta = outer_step(meta, plus, minus, plan.delta, cfg)
            trace.append(MetaTraceRow(meta.outer_step, meta.omega.tolist(), meta.lambda_label(), loss))
        gens, init_r, final_r = [], [], []
        if final_episodes:
            ids = tuple(range(len(tasks)))
            final = _run_episodes(ids, gen_init, [meta], tasks, spec, cfg, train, pool)[0]
            gens = [e.generator for e in final]
            init_r = [e.initial_ratio for e in final]
            final_r = [e.ratio for e in final]
    finally:
        if pool is not None:
            pool.shutdown()
    return MetaResult(meta, gens, trace, init_r, final_r)


# ---------------------------------------------------------------- layer-set search

LAYER_DELTA = 1e-6


def layer_ratio(phi: ParamVector, theta: ParamVector, mix: ParamVector, layers: LayerSet, sigma: float) -> float:
    """Sum over ``l`` in ``layers`` of ``D[phi_l || theta_l] / (D[phi_l || mix_l] + delta)``."""
    return float(sum(param_divergence(phi, theta, LayerSet((l,)), sigma)
                     / (param_divergence(phi, mix, LayerSet((l,)), sigma) + LAYER_DELTA)
                     for l in layers.ids))


def layerwise_spec(sigma: float = 0.1, mix_weight: float = 1.0) -> ObjectiveSpec:
    return ObjectiveSpec((Term("parameter", DivergenceConfig(), "max", 1.0, "pretrained", sigma),
                          Term("parameter", DivergenceConfig(), "min", mix_weight, "mixture", sigma)),
                         Guards(bound=None))


@dataclass
class LayerwiseReport:
    best: LayerSet
    values: dict[str, float]
    frozen_ok: dict[str, bool]
    generators: dict[str, LayeredGenerator]

    def to_dict(self) -> dict:
        return {"best": str(self.best), "values": self.values, "frozen_unchanged": self.frozen_ok}


def layerwise_meta(models: Sequence[LayeredGenerator], candidates: Sequence[LayerSet], task: int = 0,
                   spec: ObjectiveSpec | None = None, steps: int = 200, train: TrainConfig | None = None,
                   omega=None, X=None) -> LayerwiseReport:
    """Score each candidate layer set for ``task`` and return the best.

    Starting from the task's own parameters, train away from them and toward
    the omega-interpolation of the other tasks' models on the candidate spans;
    the score is :func:`layer_ratio` after training.
    """
    if not candidates:
        raise ConfigurationError("no layer-set candidates")
    if not models:
        raise ConfigurationError("no models")
    for m in models[1:]:
        if m.layout != models[0].layout:
            raise ContractViolation("models must share a layout")
    spec = spec or layerwise_spec()
    sigma = next(t.sigma_param for t in spec.terms if t.domain == "parameter")
    n = len(models)
    w = np.full(n, 1.0 / n) if omega is None else check_simplex(omega, "omega")
    train = train or TrainConfig()
    own = models[task]
    others = [m.params for j, m in enumerate(models) if j != task] or [own.params]
    w_other = np.delete(w, task) if n > 1 else np.ones(1)
    w_other = w_other / w_other.sum()
    values, frozen, gens = {}, {}, {}
    for lam in candidates:
        lam.check(own.layout)
        mix = interpolate_params(others, w_other, lam)
        res = train_param_divergence(own, own.params, lam, spec, X, steps, train, {"mixture": mix})
        key = str(lam)
        values[key] = layer_ratio(res.generator.params, own.params, mix, lam, sigma)
        keep = ~own.layout.mask(lam)
        frozen[key] = bool(np.array_equal(res.generator.params.values[keep], own.params.values[keep]))
        gens[key] = res.generator
    best_key = max(values, key=lambda k: values[k])
    best = next(l for l in candidates if str(l) == best_key)
    return LayerwiseReport(best, values, frozen, gens)
