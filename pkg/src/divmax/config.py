"""Experiment configuration: loading, schema validation and default resolution.

A config is a JSON document with sections ``data``, ``model``,
``objective``, ``meta``, ``metrics`` and ``run``. :func:`resolve` fills in
every default so the resolved document can be echoed into run manifests.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
from json_source_map import calculate as source_map

from .dists import synthetic_params
from .div import DivergenceConfig
from .errors import ConfigurationError, ContractViolation
from .gens import LayerSet, LayeredGenerator
from .meta import EpisodeConfig, MetaKnowledge
from .metrics import MetricsConfig
from .objectives import Guards, ObjectiveSpec, Term, TrainConfig, ratio_spec

DEFAULTS = {
    "model": {"latent_dim": 2, "noise_dim": 0, "hidden": [32, 32], "hidden_activation": "tanh",
              "out_activation": "identity", "init_scale": 1.0},
    "objective": {"mode": "baseline", "weight": 1.0, "pretrain_steps": 0, "task_index": 0,
                  "layers": None, "sigma_param": 0.1, "data_weight": 1.0},
    "meta": {"inner_steps": 100, "tasks_per_outer": 1, "outer_steps": 20, "perturbation": 0.1,
             "outer_lr": 0.1, "aggregation": "mean", "joint": False, "normalize": True,
             "omega_init": None, "lambda": None},
    "run": {"steps": 2000, "log_interval": 100, "seed": 0, "batch_size": 256, "ref_batch": 256,
            "lr": 1e-2, "n_eval": 1000},
}


class ConfigError(ConfigurationError):
    """A config problem, optionally anchored to a line of the source file."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)
        self.line = line


def _schema() -> dict:
    return json.loads(resources.files("divmax").joinpath("schema/experiment.json").read_text())


def _pointer(parts) -> str:
    return "".join("/" + str(p).replace("~", "~0").replace("/", "~1") for p in parts)


def _line_of(smap: dict, parts) -> int | None:
    parts = list(parts)
    while True:
        entry = smap.get(_pointer(parts))
        if entry is not None:
            loc = entry.key_start or entry.value_start
            return loc.line + 1
        if not parts:
            return None
        parts.pop()


def parse(text: str, path: str = "<config>") -> dict:
    """Parse and schema-check a config; errors name the offending line."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg} (column {exc.colno})", path, exc.lineno) from exc
    validator = jsonschema.Draft202012Validator(_schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: (list(map(str, e.absolute_path)), e.message))
    if errors:
        smap = source_map(text)
        err = errors[0]
        loc = "/".join(map(str, err.absolute_path)) or "(root)"
        more = f" (+{len(errors) - 1} more)" if len(errors) > 1 else ""
        raise ConfigError(f"{loc}: {err.message}{more}", path, _line_of(smap, err.absolute_path))
    return doc


def load(path) -> dict:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read config: {exc}", str(p)) from exc
    return parse(text, str(p))


def _div(doc: dict | None) -> dict:
    return DivergenceConfig.from_dict(doc or {}).to_dict()


def resolve(doc: dict, seed: int | None = None, out: str | None = None, default_out: str = "runs/default") -> dict:
    """Fill every default. ``seed``/``out`` override ``run.seed``/``run.out_dir``;
    the data and init seeds default to the run seed."""
    cfg = copy.deepcopy(doc)
    res = {}
    run = {**DEFAULTS["run"], **cfg.get("run", {})}
    if seed is not None:
        run["seed"] = int(seed)
    run["out_dir"] = out if out is not None else run.get("out_dir", default_out)
    res["run"] = run

    data = dict(cfg["data"])
    data["params"] = synthetic_params(data["kind"], data.get("params"))
    data.setdefault("seed", run["seed"])
    if "partition" in data:
        part = {"k": None, "seed": data["seed"], "subsample": None, **data["partition"]}
        if part["strategy"] == "random_k" and part["k"] is None:
            raise ConfigError("data/partition: random_k needs k")
        data["partition"] = part
    res["data"] = data

    model = {**DEFAULTS["model"], **cfg.get("model", {})}
    model.setdefault("init_seed", run["seed"])
    res["model"] = model

    obj = {**DEFAULTS["objective"], **cfg.get("objective", {})}
    obj["divergence"] = _div(obj.get("divergence"))
    obj["denominator"] = _div(obj.get("denominator", obj["divergence"]))
    default_bound = None if obj["mode"] in ("baseline", "ratio") else 10.0
    obj["guards"] = {**asdict(Guards(bound=default_bound)), **obj.get("guards", {})}
    res["objective"] = obj

    res["meta"] = {**DEFAULTS["meta"], **cfg.get("meta", {})}
    res["metrics"] = MetricsConfig.from_dict(cfg.get("metrics")).to_dict()
    return res


def digest(resolved: dict) -> str:
    """Content hash of a resolved config, independent of the output directory."""
    doc = copy.deepcopy(resolved)
    doc["run"].pop("out_dir", None)
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return "sha256:" + hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------- builders

def train_config(res: dict, steps: int | None = None) -> TrainConfig:
    r = res["run"]
    return TrainConfig(steps=r["steps"] if steps is None else steps, batch_size=r["batch_size"],
                       ref_batch=r["ref_batch"], lr=r["lr"], log_interval=r["log_interval"],
                       seed=r["seed"], n_eval=r["n_eval"])


def generator(res: dict, out_dim: int) -> LayeredGenerator:
    m = res["model"]
    return LayeredGenerator.build(m["latent_dim"], m["hidden"], out_dim, m["noise_dim"],
                                  m["hidden_activation"], m["out_activation"], m["init_seed"], m["init_scale"])


def guards(res: dict) -> Guards:
    g = Guards(**res["objective"]["guards"])
    return g.check()


def layer_set(ids, gen: LayeredGenerator) -> LayerSet:
    if ids is None:
        return LayerSet.last(gen.layout)
    try:
        return LayerSet(tuple(ids)).check(gen.layout)
    except ContractViolation as exc:
        raise ConfigError(f"objective/layers: {exc}") from exc


def objective_spec(res: dict) -> ObjectiveSpec:
    o = res["objective"]
    div = DivergenceConfig.from_dict(o["divergence"])
    mode = o["mode"]
    if mode == "baseline":
        return ObjectiveSpec((Term("data", div, "min", o["weight"], "data"),), guards(res))
    if mode == "maxdiv":
        return ObjectiveSpec((Term("data", div, "max", o["weight"], "data"),), guards(res))
    if mode == "ratio":
        return ratio_spec(div, DivergenceConfig.from_dict(o["denominator"]), o["weight"], guards(res))
    if mode == "latent":
        return ObjectiveSpec((Term("latent", div, "max", o["weight"], "prior"),), guards(res))
    terms = [Term("parameter", div, "max", o["weight"], "pretrained", o["sigma_param"])]
    if o["data_weight"] > 0:
        terms.append(Term("data", div, "min", o["data_weight"], "data"))
    return ObjectiveSpec(tuple(terms), guards(res))


def episode_config(res: dict) -> EpisodeConfig:
    m = res["meta"]
    return EpisodeConfig(m["inner_steps"], m["tasks_per_outer"], m["outer_steps"], m["perturbation"],
                         m["outer_lr"], m["aggregation"], m["joint"], m["normalize"])


def meta_knowledge(res: dict, n_tasks: int, gen: LayeredGenerator) -> MetaKnowledge:
    m = res["meta"]
    lam = None if m["lambda"] is None else layer_set(m["lambda"], gen)
    if m["omega_init"] is None:
        return MetaKnowledge.uniform(n_tasks, lam)
    w = np.asarray(m["omega_init"], dtype=np.float64)
    if w.size != n_tasks or np.any(w <= 0):
        raise ConfigError(f"meta/omega_init: need {n_tasks} positive weights")
    return MetaKnowledge(np.log(w / w.sum()), lam)


def metrics_config(res: dict) -> MetricsConfig:
    return MetricsConfig.from_dict(res["metrics"])
