"""Training objectives: divergence minimization, guarded maximization, latent
exploration, parameter-domain divergence and the leave-one-out ratio.

Every objective is reduced to one scalar loss that is *minimized*; a ``max``
term contributes ``-weight * D`` (optionally soft-bounded). All runs share
:func:`_optimize`, which records a :class:`TrainTrace`.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from . import autodiff as ad
from . import kernels
from .dists import GaussianMixture, SampleSet, TaskCollection, rng_from
from .div import (DivergenceConfig, divergence, median_bandwidth, mmd2_tape,
                  param_divergence, param_divergence_tape, projections,
                  resample_weighted, sliced_wasserstein_tape)
from .errors import ConfigurationError, ContractViolation, GuardConflictError, NumericalError
from .gens import LayeredGenerator, LayerSet, ParamVector, draw_inputs
from .support import build_support, precision_recall, regime_report, RegimeReport

log = logging.getLogger(__name__)

DOMAINS = ("data", "latent", "parameter")
DIRECTIONS = ("min", "max")
TARGETS = ("total_extrapolation", "total_transfer", "containment")
RATIO_DELTA = 1e-6
TRAINABLE = ("mmd_rbf", "sliced_wasserstein")


@dataclass(frozen=True)
class Term:
    """One weighted divergence in an objective.

    ``reference`` names what the term compares against: ``data`` (the
    training set), ``task`` / ``mixture`` (ratio numerator / leave-one-out
    mixture), ``prior`` (latent domain) or ``pretrained`` / ``mixture``
    (parameter domain).
    """

    domain: str = "data"
    divergence: DivergenceConfig = field(default_factory=DivergenceConfig)
    direction: str = "min"
    weight: float = 1.0
    reference: str = "data"
    sigma_param: float = 0.1

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ConfigurationError(f"unknown domain {self.domain!r}")
        if self.direction not in DIRECTIONS:
            raise ConfigurationError(f"unknown direction {self.direction!r}")
        if not math.isfinite(self.weight):
            raise ConfigurationError("term weights must be finite")
        if self.domain == "parameter" and not self.sigma_param > 0:
            raise ConfigurationError("sigma_param must be > 0")

    @property
    def sign(self) -> float:
        return -1.0 if self.direction == "max" else 1.0

    def flipped(self) -> "Term":
        return replace(self, direction="min" if self.direction == "max" else "max", weight=-self.weight)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["divergence"] = self.divergence.to_dict()
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "Term":
        doc = dict(doc)
        doc["divergence"] = DivergenceConfig.from_dict(doc.get("divergence"))
        return cls(**doc)


@dataclass(frozen=True)
class Guards:
    """Safeguards against runaway maximization.

    ``bound`` soft-clips every max term to ``bound * tanh(D / bound)``.
    ``support_weight`` (lambda_supp) scales a softplus penalty on the signed
    support margin, steering toward ``target_regime``:

    total_extrapolation
        reference points must lie inside the generated support (recall);
    containment
        generated points must lie inside the reference support (precision);
    total_transfer
        generated points must lie outside the reference support.

    ``min_recall`` records a recall requirement; it cannot be combined with a
    total_transfer target.
    """

    bound: float | None = 10.0
    support_weight: float = 0.0
    target_regime: str = "total_extrapolation"
    support_method: str = "convex_hull"
    knn_k: int = 3
    softness: float = 0.05
    min_recall: float | None = None
    spread_weight: float = 0.0
    output_radius: float | None = None
    radius_weight: float = 10.0

    def __post_init__(self):
        if self.target_regime not in TARGETS:
            raise ConfigurationError(f"unknown target regime {self.target_regime!r}")
        if self.support_weight < 0 or self.spread_weight < 0 or self.radius_weight < 0:
            raise ConfigurationError("guard weights must be >= 0")
        if self.bound is not None and not self.bound > 0:
            raise ConfigurationError("bound must be > 0")
        if self.softness <= 0:
            raise ConfigurationError("softness must be > 0")

    def check(self):
        if self.target_regime == "total_transfer" and self.min_recall is not None:
            raise GuardConflictError("a total_transfer target contradicts a recall requirement")
        return self


@dataclass(frozen=True)
class ObjectiveSpec:
    terms: tuple[Term, ...]
    guards: Guards = field(default_factory=Guards)
    combine: str = "sum"
    reference: str | None = None
    latent_prior: str = "standard_normal"

    def __post_init__(self):
        terms = tuple(self.terms)
        if not terms:
            raise ConfigurationError("an objective needs at least one term")
        if self.combine not in ("sum", "ratio"):
            raise ConfigurationError(f"unknown combine rule {self.combine!r}")
        object.__setattr__(self, "terms", terms)

    def flipped(self) -> "ObjectiveSpec":
        return replace(self, terms=tuple(t.flipped() for t in self.terms))

    def to_dict(self) -> dict:
        return {
            "terms": [t.to_dict() for t in self.terms],
            "guards": asdict(self.guards),
            "combine": self.combine,
            "reference": self.reference,
            "latent_prior": self.latent_prior,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ObjectiveSpec":
        return cls(
            tuple(Term.from_dict(t) for t in doc["terms"]),
            Guards(**doc.get("guards", {})),
            doc.get("combine", "sum"),
            doc.get("reference"),
            doc.get("latent_prior", "standard_normal"),
        )


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 256
    ref_batch: int = 256
    lr: float = 1e-2
    log_interval: int = 100
    seed: int = 0
    n_eval: int = 1000
    max_ref_eval: int = 2000
    ratio_slack: float = 0.25

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.ref_batch < 1 or self.log_interval < 1:
            raise ConfigurationError("steps >= 0; batch sizes and log interval >= 1")


@dataclass
class TraceRecord:
    step: int
    loss: float
    terms: list[float]
    guards: dict[str, float]
    precision: float | None = None
    recall: float | None = None


@dataclass
class TrainTrace:
    seed: int
    term_names: list[str]
    records: list[TraceRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        if name == "loss":
            return np.array([r.loss for r in self.records])
        if name in self.term_names:
            j = self.term_names.index(name)
            return np.array([r.terms[j] for r in self.records])
        return np.array([r.guards.get(name, np.nan) for r in self.records])

    def snapshots(self) -> list[TraceRecord]:
        return [r for r in self.records if r.recall is not None]

    def to_csv(self) -> str:
        guard_names = sorted({k for r in self.records for k in r.guards})
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss", *self.term_names, *guard_names, "precision", "recall", "seed"])
        for r in self.records:
            w.writerow([r.step, repr(r.loss), *(repr(v) for v in r.terms),
                        *(repr(r.guards.get(g, float("nan"))) for g in guard_names),
                        "" if r.precision is None else repr(r.precision),
                        "" if r.recall is None else repr(r.recall), self.seed])
        return buf.getvalue()


def smoothed_ends(values, frac: float = 0.1) -> tuple[float, float]:
    """Means of the first and last ``frac`` of a series (at least one point each)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ContractViolation("empty series")
    w = max(1, int(round(frac * v.size)))
    return float(v[:w].mean()), float(v[-w:].mean())


@dataclass
class TrainResult:
    generator: LayeredGenerator
    trace: TrainTrace
    regime: RegimeReport | None = None
    initial: dict[str, float] = field(default_factory=dict)
    final: dict[str, float] = field(default_factory=dict)
    bandwidths: dict[str, float] = field(default_factory=dict)
    sampler: GaussianMixture | None = None


# ---------------------------------------------------------------- building blocks

def _standard_prior(gen: LayeredGenerator) -> GaussianMixture:
    return GaussianMixture.standard_normal(gen.latent_dim)


def _sub_rows(X: np.ndarray, n: int, rng) -> np.ndarray:
    if X.shape[0] <= n:
        return X
    return X[np.sort(rng.choice(X.shape[0], n, replace=False))]


def _cap_rows(X: np.ndarray, cap: int) -> np.ndarray:
    if X.shape[0] <= cap:
        return X
    return X[np.linspace(0, X.shape[0] - 1, cap).round().astype(int)]


def _term_value(U: ad.Var, R: np.ndarray, term: Term, h: float | None, weights=None, theta=None) -> ad.Var:
    cfg = term.divergence
    if cfg.kind == "mmd_rbf":
        return mmd2_tape(U, R, h, weights, cfg.unbiased)
    if cfg.kind == "sliced_wasserstein":
        theta = projections(R.shape[1], cfg.n_projections, cfg.seed) if theta is None else theta
        return sliced_wasserstein_tape(U, R, theta)
    raise ConfigurationError(f"{cfg.kind} is not differentiable; train with one of {TRAINABLE}")


def _apply_direction(D: ad.Var, term: Term, guards: Guards) -> ad.Var:
    if term.direction == "max" and guards.bound is not None:
        D = ad.tanh_clip(D, guards.bound)
    return D * (term.sign * term.weight)


def _soft_hinge(m: ad.Var, tau: float) -> ad.Var:
    return ad.softplus(m * (1.0 / tau)) * tau


def _hull_margin_of_fixed(points: ad.Var, support) -> ad.Var:
    """Margins of Var points against a fixed support model."""
    if support.variant == "knn_balls":
        _, arg = kernels.ball_margin(points.value, support.points, support.radii)
        diff = points - support.points[arg]
        dist = ad.sqrt((diff * diff).sum(axis=1) + 1e-12)
        return dist - support.radii[arg]
    eq = support.equations
    return ad.max(points @ eq[:, :-1].T + eq[:, -1], axis=1)


def _margin_against_var_support(R: np.ndarray, U: ad.Var, method: str, k: int) -> ad.Var:
    """Margins of fixed points ``R`` against the support of Var samples ``U``.

    Facet normals (hull) and ball radii (knn) are held fixed; offsets move with
    the generated points.
    """
    Uv = U.value
    n, d = Uv.shape
    if method == "convex_hull" and d == 1:
        hi = ad.max(U.reshape(n), axis=0)
        lo = -ad.max(-U.reshape(n), axis=0)
        x = R[:, 0]
        both = ad.concat([(x - hi).reshape(-1, 1), (lo - x).reshape(-1, 1)], axis=1)
        return ad.max(both, axis=1)
    if method == "convex_hull" and d == 2:
        try:
            hull = ConvexHull(Uv, qhull_options="QJ")
        except QhullError:
            hull = None
        if hull is not None:
            normals = hull.equations[:, :-1]
            simp = hull.simplices
            centers = (U[simp[:, 0]] + U[simp[:, 1]]) * 0.5
            offsets = (centers * normals).sum(axis=1)
            return ad.max((R @ normals.T) - offsets.reshape(1, -1), axis=1)
    kk = min(k, n - 1)
    if kk < 1:
        diff = U[np.zeros(R.shape[0], dtype=int)] - R
        return ad.sqrt((diff * diff).sum(axis=1) + 1e-12)
    radii = kernels.knn_distances(Uv, Uv, kk, exclude_self=True)[0][:, -1]
    _, arg = kernels.ball_margin(R, Uv, radii)
    diff = U[arg] - R
    return ad.sqrt((diff * diff).sum(axis=1) + 1e-12) - radii[arg]


class _Guard:
    """Tape penalties for a :class:`Guards` block against a fixed reference set."""

    def __init__(self, guards: Guards, reference: np.ndarray):
        self.g = guards.check()
        self.reference = reference
        self.fixed_support = None
        if guards.support_weight > 0 and guards.target_regime in ("containment", "total_transfer"):
            self.fixed_support = build_support(reference, guards.support_method, k=guards.knn_k, allow_degenerate=True)
            if self.fixed_support.uses_lp:
                self.fixed_support = build_support(reference, "knn_balls", k=guards.knn_k)

    def penalties(self, U: ad.Var, R_batch: np.ndarray):
        g, out, total = self.g, {}, None

        def add(name, val):
            nonlocal total
            out[name] = float(val.value)
            total = val if total is None else total + val

        if g.support_weight > 0:
            if g.target_regime == "total_extrapolation":
                m = _margin_against_var_support(R_batch, U, g.support_method, g.knn_k)
                pen = _soft_hinge(m, g.softness).mean()
            else:
                m = _hull_margin_of_fixed(U, self.fixed_support)
                if g.target_regime == "total_transfer":
                    m = -m
                pen = _soft_hinge(m, g.softness).mean()
            add("support_penalty", pen * g.support_weight)
        if g.spread_weight > 0:
            c = U - U.mean(axis=0, keepdims=True)
            add("spread_penalty", (c * c).mean() * (-g.spread_weight))
        if g.output_radius is not None:
            norms = ad.sqrt((U * U).sum(axis=1) + 1e-12)
            add("radius_penalty", _soft_hinge(norms - g.output_radius, g.softness).mean() * g.radius_weight)
        return total, out


def _optimize(n_params: int, init: np.ndarray, build_loss: Callable, cfg: TrainConfig,
              term_names: list[str], mask: np.ndarray | None = None,
              snapshot: Callable[[np.ndarray], tuple[float, float]] | None = None):
    """Adam on ``build_loss(tape, phi_var, rng) -> (loss, term_values, guard_values)``."""
    state = ad.OptimizerState.init(n_params, lr=cfg.lr)
    values = np.array(init, dtype=np.float64)
    trace = TrainTrace(cfg.seed, term_names)
    rng = rng_from(cfg.seed)
    for t in range(cfg.steps):
        tape = ad.Tape()
        phi = tape.var(values)
        loss, terms, guards = build_loss(tape, phi, rng)
        lv = float(loss.value)
        if not math.isfinite(lv):
            raise NumericalError(f"non-finite loss at step {t}")
        g = tape.grad(loss, phi)
        values, state = ad.step(state, values, g, "minimize", mask)
        rec = TraceRecord(t, lv, terms, guards)
        if snapshot is not None and (t % cfg.log_interval == 0 or t == cfg.steps - 1):
            rec.precision, rec.recall = snapshot(values)
        trace.records.append(rec)
    return values, trace


def _data_loss_builder(gen: LayeredGenerator, prior: GaussianMixture, spec: ObjectiveSpec,
                       refs: dict[str, tuple[np.ndarray, np.ndarray | None]], h: dict[str, float],
                       cfg: TrainConfig, guard: _Guard | None, trainable: bool = True):
    """Loss over data-domain terms; ``refs`` maps reference names to
    ``(points, weights)``. Point-wise terms pair a frozen latent batch with its
    nearest reference rows at step 0."""
    data_terms = [(j, t) for j, t in enumerate(spec.terms) if t.domain == "data"]
    pairings: dict[int, tuple[np.ndarray, np.ndarray | None, np.ndarray]] = {}
    for j, t in data_terms:
        if t.divergence.mode == "pointwise":
            z0, e0 = draw_inputs(gen, prior, cfg.batch_size, cfg.seed + 7919 * (j + 1))
            R = refs[t.reference][0]
            idx = kernels.knn_distances(gen.forward(z0, e0), R, 1)[1][:, 0]
            pairings[j] = (z0, e0, R[idx])
        elif t.divergence.kind not in TRAINABLE:
            raise ConfigurationError(f"{t.divergence.kind} is not differentiable; train with one of {TRAINABLE}")
    thetas = {j: projections(gen.out_dim, t.divergence.n_projections, t.divergence.seed)
              for j, t in data_terms if t.divergence.kind == "sliced_wasserstein"}
    ratio = spec.combine == "ratio"

    def ref_batch(t: Term, rng, n):
        R, w = refs[t.reference]
        if t.divergence.kind == "sliced_wasserstein":
            if w is None:
                return R[rng.choice(R.shape[0], n, replace=R.shape[0] < n)], None
            return resample_weighted(R, w, n, rng.integers(2**63)), None
        if R.shape[0] <= cfg.ref_batch:
            return R, w
        idx = np.sort(rng.choice(R.shape[0], cfg.ref_batch, replace=False))
        if w is None:
            return R[idx], None
        wb = w[idx]
        return R[idx], wb / wb.sum()

    def build(tape, phi, rng, U_override=None):
        z, eps = draw_inputs(gen, prior, cfg.batch_size, rng.integers(2**63))
        U = gen.forward_tape(phi, z, eps) if U_override is None else U_override(tape, phi, rng)
        values, parts = [], {}
        for j, t in data_terms:
            if j in pairings:
                z0, e0, target = pairings[j]
                diff = gen.forward_tape(phi, z0, e0) - target
                D = (diff * diff).sum(axis=1).mean()
            else:
                R, w = ref_batch(t, rng, U.value.shape[0])
                D = _term_value(U, R, t, h.get(t.reference), w, thetas.get(j))
            parts[j] = D
        loss = None
        if ratio:
            num = next(j for j, t in data_terms if t.direction == "max")
            den = next(j for j, t in data_terms if t.direction == "min")
            tn = spec.terms[num]
            log_ratio = ad.log(parts[num] + 1e-12) - ad.log(parts[den] + RATIO_DELTA)
            loss = log_ratio * (-tn.weight)
        for j, t in data_terms:
            values.append(float(parts[j].value))
            if not ratio:
                c = _apply_direction(parts[j], t, spec.guards)
                loss = c if loss is None else loss + c
        guards = {}
        if guard is not None:
            R_pen = refs["data"][0] if "data" in refs else next(iter(refs.values()))[0]
            pen, guards = guard.penalties(U, _sub_rows(R_pen, cfg.ref_batch, rng))
            if pen is not None:
                loss = loss + pen
        if ratio:
            guards["ratio"] = values[[j for j, _ in data_terms].index(num)] / (
                values[[j for j, _ in data_terms].index(den)] + RATIO_DELTA)
        return loss, values, guards

    return build, [f"term{j}_{t.domain}_{t.direction}" for j, t in data_terms]


def _eval_divergences(gen, prior, spec, refs, h, cfg) -> dict[str, float]:
    """Aggregated data-term divergences on a fixed evaluation sample."""
    z, eps = draw_inputs(gen, prior, cfg.n_eval, cfg.seed + 104729)
    U = gen.forward(z, eps)
    out = {}
    for j, t in enumerate(spec.terms):
        if t.domain != "data":
            continue
        R, w = refs[t.reference]
        if w is None:
            R = _cap_rows(R, cfg.max_ref_eval)
        dcfg = t.divergence
        if dcfg.kind == "mmd_rbf":
            dcfg = dcfg.with_bandwidth(h[t.reference])
        if dcfg.mode == "pointwise":
            dcfg = replace(dcfg, mode="aggregated")
        out[f"term{j}"] = divergence(U, R, dcfg, w)
    return out


def _eval_samples(gen, prior, cfg) -> np.ndarray:
    z, eps = draw_inputs(gen, prior, cfg.n_eval, cfg.seed + 104729)
    return gen.forward(z, eps)


def _regime(gen, prior, X, spec, cfg) -> RegimeReport:
    return regime_report(_eval_samples(gen, prior, cfg), _cap_rows(X, cfg.max_ref_eval),
                         spec.guards.support_method, spec.guards.knn_k)


def _points(X) -> np.ndarray:
    return X.points if isinstance(X, SampleSet) else np.atleast_2d(np.asarray(X, dtype=np.float64))


def evaluate_regime(gen: LayeredGenerator, X, spec: ObjectiveSpec, train: TrainConfig | None = None,
                    prior: GaussianMixture | None = None) -> RegimeReport:
    """Regime of ``gen`` against ``X`` on the fixed evaluation sample used by training."""
    return _regime(gen, prior or _standard_prior(gen), _points(X), spec, train or TrainConfig())


def _bandwidths(spec, refs):
    h = {}
    for t in spec.terms:
        if t.domain == "data" and t.divergence.kind == "mmd_rbf" and t.reference not in h:
            fixed = t.divergence.fixed_bandwidth
            h[t.reference] = fixed if fixed is not None else median_bandwidth(refs[t.reference][0])
    return h


def _train_data(gen, refs, spec, cfg, prior=None, trainable_layers: LayerSet | None = None,
                snapshot_ref: np.ndarray | None = None, guard_ref: np.ndarray | None = None) -> TrainResult:
    prior = prior or _standard_prior(gen)
    h = _bandwidths(spec, refs)
    needs_guard = (spec.guards.support_weight > 0 or spec.guards.spread_weight > 0
                   or spec.guards.output_radius is not None)
    guard = _Guard(spec.guards, guard_ref) if needs_guard else None
    build, names = _data_loss_builder(gen, prior, spec, refs, h, cfg, guard)
    initial = _eval_divergences(gen, prior, spec, refs, h, cfg)
    mask = None if trainable_layers is None else gen.layout.mask(trainable_layers.check(gen.layout))

    snapshot = None
    if snapshot_ref is not None:
        P = _cap_rows(snapshot_ref, cfg.max_ref_eval)

        def snapshot(values):
            return precision_recall(_eval_samples(gen.with_params(values), prior, cfg), P,
                                    spec.guards.support_method, spec.guards.knn_k)

    values, trace = _optimize(gen.layout.size, gen.params.values, build, cfg, names, mask, snapshot)
    trained = gen.with_params(values)
    final = _eval_divergences(trained, prior, spec, refs, h, cfg)
    return TrainResult(trained, trace, None, initial, final, h)


# ---------------------------------------------------------------- public operations

def baseline_spec(cfg: DivergenceConfig | None = None) -> ObjectiveSpec:
    return ObjectiveSpec((Term("data", cfg or DivergenceConfig(), "min", 1.0, "data"),), Guards(bound=None))


def maxdiv_spec(cfg: DivergenceConfig | None = None, support_weight: float = 0.0, **guards) -> ObjectiveSpec:
    return ObjectiveSpec((Term("data", cfg or DivergenceConfig(), "max", 1.0, "data"),),
                         Guards(support_weight=support_weight, **guards))


def fit_baseline(gen: LayeredGenerator, X, cfg: DivergenceConfig | ObjectiveSpec | None = None,
                 steps: int | None = None, train: TrainConfig | None = None) -> TrainResult:
    """Minimize the divergence between generated samples and ``X``."""
    spec = cfg if isinstance(cfg, ObjectiveSpec) else baseline_spec(cfg)
    for t in spec.terms:
        if t.domain != "data" or t.direction != "min":
            raise ConfigurationError("fit_baseline takes data-domain min terms only")
    train = train or TrainConfig()
    if steps is not None:
        train = replace(train, steps=steps)
    P = _points(X)
    return _train_data(gen, {"data": (P, None)}, spec, train, guard_ref=P)


def train_maxdiv(gen: LayeredGenerator, X, spec: ObjectiveSpec, steps: int | None = None,
                 train: TrainConfig | None = None, prior: GaussianMixture | None = None) -> TrainResult:
    """Maximize a data-domain divergence from ``X`` under the objective's guards.

    Returns the trained generator, its trace (with periodic precision/recall
    snapshots) and the final regime report.
    """
    if not any(t.domain == "data" and t.direction == "max" for t in spec.terms):
        raise ConfigurationError("train_maxdiv needs a data-domain max term")
    spec.guards.check()
    train = train or TrainConfig()
    if steps is not None:
        train = replace(train, steps=steps)
    P = _points(X)
    prior = prior or _standard_prior(gen)
    res = _train_data(gen, {"data": (P, None)}, spec, train, prior, snapshot_ref=P, guard_ref=P)
    res.regime = _regime(res.generator, prior, P, spec, train)
    return res


def _latent_params_to_mixture(values: np.ndarray, d: int) -> GaussianMixture:
    mu, log_std = values[:d], values[d:]
    return GaussianMixture(np.ones(1), mu[None], np.diag(np.exp(2 * log_std))[None])


def latent_explore(gen: LayeredGenerator, X, spec: ObjectiveSpec, steps: int | None = None,
                   train: TrainConfig | None = None, prior: GaussianMixture | None = None) -> TrainResult:
    """Learn a diverging latent sampler ``N(mu, diag(sigma^2))`` for a frozen generator.

    The latent term compares sampler draws with draws of the generator's own
    prior (standing in for its aggregated posterior). Guards act on the decoded
    outputs against the support of ``X``.
    """
    latent_terms = [t for t in spec.terms if t.domain == "latent"]
    if not latent_terms:
        raise ConfigurationError("latent_explore needs a latent-domain term")
    spec.guards.check()
    train = train or TrainConfig()
    if steps is not None:
        train = replace(train, steps=steps)
    prior = prior or _standard_prior(gen)
    d = gen.latent_dim
    P = _points(X)
    prior_pool, _ = prior.sample(max(train.max_ref_eval, train.ref_batch), train.seed + 15485863)
    h = median_bandwidth(prior_pool)
    needs_guard = spec.guards.support_weight > 0 or spec.guards.output_radius is not None
    guard = _Guard(spec.guards, P) if needs_guard else None
    frozen = gen.params.values
    thetas = [projections(d, t.divergence.n_projections, t.divergence.seed) for t in latent_terms]

    def build(tape, phi, rng):
        eta = rng_from(rng.integers(2**63)).standard_normal((train.batch_size, d))
        z = phi[np.arange(d)].reshape(1, d) + ad.exp(phi[np.arange(d, 2 * d)]).reshape(1, d) * eta
        loss, vals = None, []
        for t, th in zip(latent_terms, thetas):
            R = _sub_rows(prior_pool, train.batch_size if t.divergence.kind == "sliced_wasserstein" else train.ref_batch, rng)
            if t.divergence.kind == "sliced_wasserstein" and R.shape[0] != train.batch_size:
                R = prior_pool[rng.choice(prior_pool.shape[0], train.batch_size)]
            D = _term_value(z, R, t, h, None, th)
            vals.append(float(D.value))
            c = _apply_direction(D, t, spec.guards)
            loss = c if loss is None else loss + c
        guards = {}
        if guard is not None:
            eps = rng_from(rng.integers(2**63)).standard_normal((train.batch_size, gen.noise_dim)) if gen.noise_dim else None
            U = gen.forward_tape(frozen, z, eps)
            pen, guards = guard.penalties(U, _sub_rows(P, train.ref_batch, rng))
            if pen is not None:
                loss = loss + pen
        return loss, vals, guards

    init = np.concatenate([prior.means[0], 0.5 * np.log(np.diag(prior.covariances[0]))]) \
        if prior.n_components == 1 else np.concatenate([np.zeros(d), np.zeros(d)])
    names = [f"term{j}_latent_{t.direction}" for j, t in enumerate(latent_terms)]

    def latent_eval(values):
        sampler = _latent_params_to_mixture(values, d)
        z, _ = sampler.sample(train.n_eval, train.seed + 104729)
        ref = _cap_rows(prior_pool, train.n_eval)
        return {f"term{j}": divergence(z, ref, t.divergence.with_bandwidth(h) if t.divergence.kind == "mmd_rbf" else t.divergence)
                for j, t in enumerate(latent_terms)}

    initial = latent_eval(init)
    values, trace = _optimize(init.size, init, build, train, names)
    sampler = _latent_params_to_mixture(values, d)
    res = TrainResult(gen, trace, None, initial, latent_eval(values), {"prior": h}, sampler)
    res.regime = _regime(gen, sampler, P, spec, train)
    return res


def train_param_divergence(gen: LayeredGenerator, theta: ParamVector, layers: LayerSet, spec: ObjectiveSpec,
                           X=None, steps: int | None = None, train: TrainConfig | None = None,
                           param_refs: dict[str, ParamVector] | None = None) -> TrainResult:
    """Push the parameters in ``layers`` away from ``theta``; other spans stay frozen.

    Parameter terms use ``reference='pretrained'`` (``theta``) or any key of
    ``param_refs``. Data-domain min terms against ``X`` keep outputs sane.
    """
    if not any(t.domain == "parameter" and t.direction == "max" for t in spec.terms):
        raise ConfigurationError("train_param_divergence needs a parameter-domain max term")
    if theta.layout != gen.layout:
        raise ContractViolation("theta and generator layouts differ")
    spec.guards.check()
    layers.check(gen.layout)
    train = train or TrainConfig()
    if steps is not None:
        train = replace(train, steps=steps)
    prior = _standard_prior(gen)
    refs_p = {"pretrained": theta, **(param_refs or {})}
    mask = gen.layout.mask(layers)
    data_spec = None
    data_terms = [t for t in spec.terms if t.domain == "data"]
    if data_terms:
        if X is None:
            raise ConfigurationError("data-domain terms need X")
        data_spec = replace(spec, terms=tuple(data_terms), guards=replace(spec.guards, support_weight=0.0))
        P = _points(X)
        refs = {"data": (P, None)}
        h = _bandwidths(data_spec, refs)
        build_data, data_names = _data_loss_builder(gen, prior, data_spec, refs, h, train, None)
    param_terms = [t for t in spec.terms if t.domain == "parameter"]
    for t in param_terms:
        if t.reference not in refs_p:
            raise ConfigurationError(f"unknown parameter reference {t.reference!r}")

    def build(tape, phi, rng):
        loss, vals, guards = None, [], {}
        for t in param_terms:
            D = param_divergence_tape(phi, refs_p[t.reference].values, mask, t.sigma_param)
            vals.append(float(D.value))
            c = _apply_direction(D, t, spec.guards)
            loss = c if loss is None else loss + c
        if data_spec is not None:
            dl, dv, dg = build_data(tape, phi, rng)
            loss = loss + dl
            vals += dv
            guards.update(dg)
        return loss, vals, guards

    names = [f"param{j}_{t.reference}_{t.direction}" for j, t in enumerate(param_terms)]
    if data_spec is not None:
        names += data_names
    values, trace = _optimize(gen.layout.size, gen.params.values, build, train, names, mask)
    trained = gen.with_params(values)
    initial = {f"param{j}": param_divergence(gen.params, refs_p[t.reference], layers, t.sigma_param)
               for j, t in enumerate(param_terms)}
    final = {f"param{j}": param_divergence(trained.params, refs_p[t.reference], layers, t.sigma_param)
             for j, t in enumerate(param_terms)}
    return TrainResult(trained, trace, None, initial, final)


def ratio_spec(num: DivergenceConfig | None = None, den: DivergenceConfig | None = None,
               weight: float = 1.0, guards: Guards | None = None) -> ObjectiveSpec:
    num = num or DivergenceConfig()
    return ObjectiveSpec(
        (Term("data", num, "max", weight, "task"), Term("data", den or num, "min", 1.0, "mixture")),
        guards or Guards(bound=None), combine="ratio")


def _ratio_refs(tasks: TaskCollection, i: int, omega=None):
    w_loo = tasks.leave_one_out(i, omega)
    pts, wts = [], []
    for j, t in enumerate(tasks.tasks):
        if j == i or w_loo[j] == 0:
            continue
        pts.append(t.points)
        wts.append(np.full(t.n, w_loo[j] / t.n))
    return {"task": (tasks.tasks[i].points, None), "mixture": (np.concatenate(pts), np.concatenate(wts))}


def eval_ratio(gen: LayeredGenerator, tasks: TaskCollection, i: int,
               cfgs: tuple[DivergenceConfig, DivergenceConfig] | DivergenceConfig | None = None,
               n: int = 1000, seed=0, omega=None, samples=None) -> tuple[float, float, float]:
    """``(D[u || p_i], D[u || mixture of the others], ratio)`` on ``n`` samples.

    The mixture uses leave-one-out weights renormalized over ``j != i``.
    """
    if len(tasks) < 2:
        raise ConfigurationError("the ratio needs at least two tasks")
    if not 0 <= i < len(tasks):
        raise ConfigurationError(f"task index {i} out of range")
    if cfgs is None or isinstance(cfgs, DivergenceConfig):
        cfgs = (cfgs or DivergenceConfig(),) * 2
    refs = _ratio_refs(tasks, i, omega)
    if samples is None:
        z, eps = draw_inputs(gen, _standard_prior(gen), n, seed)
        samples = gen.forward(z, eps)
    U = _points(samples)
    num = max(divergence(U, refs["task"][0], cfgs[0]), 0.0)
    den = max(divergence(U, refs["mixture"][0], cfgs[1], refs["mixture"][1]), 0.0)
    return num, den, num / (den + RATIO_DELTA)


def train_ratio(gen: LayeredGenerator, tasks: TaskCollection, i: int, spec: ObjectiveSpec | None = None,
                steps: int | None = None, train: TrainConfig | None = None, omega=None,
                trainable_layers: LayerSet | None = None) -> TrainResult:
    """Maximize ``D[u || p_i] / (D[u || sum_{j != i} w_j p_j] + delta)``.

    Optimization runs on the log of the ratio (same maximizers, better scaled
    gradients). Final ``initial``/``final`` dicts hold evaluation-sample values
    of ``numerator``, ``denominator`` and ``ratio``.
    """
    if len(tasks) < 2:
        raise ConfigurationError("the ratio needs at least two tasks")
    if not 0 <= i < len(tasks):
        raise ConfigurationError(f"task index {i} out of range for {len(tasks)} tasks")
    spec = spec or ratio_spec()
    if spec.combine != "ratio":
        spec = replace(spec, combine="ratio")
    dirs = sorted(t.direction for t in spec.terms if t.domain == "data")
    if dirs != ["max", "min"]:
        raise ConfigurationError("a ratio objective needs exactly one data max term and one data min term")
    train = train or TrainConfig()
    if steps is not None:
        train = replace(train, steps=steps)
    refs = _ratio_refs(tasks, i, omega)
    all_pts = tasks.all_points()
    # one shared bandwidth from the whole collection keeps both terms comparable
    spec_refs = {t.reference for t in spec.terms}
    h_all = None
    if any(t.divergence.kind == "mmd_rbf" and t.divergence.fixed_bandwidth is None for t in spec.terms):
        h_all = median_bandwidth(all_pts)
    terms = tuple(replace(t, divergence=t.divergence.with_bandwidth(h_all))
                  if t.divergence.kind == "mmd_rbf" and t.divergence.fixed_bandwidth is None else t
                  for t in spec.terms)
    spec = replace(spec, terms=terms)
    if not spec_refs <= {"task", "mixture"}:
        raise ConfigurationError(f"ratio terms reference 'task' and 'mixture', got {sorted(spec_refs)}")
    res = _train_data(gen, refs, spec, train, trainable_layers=trainable_layers, guard_ref=all_pts)
    num_cfg = next(t.divergence for t in spec.terms if t.direction == "max")
    den_cfg = next(t.divergence for t in spec.terms if t.direction == "min")
    for key, g in (("initial", gen), ("final", res.generator)):
        nm, dn, r = eval_ratio(g, tasks, i, (num_cfg, den_cfg), train.n_eval, train.seed + 104729, omega)
        getattr(res, key).update(numerator=nm, denominator=dn, ratio=r)
    return res
