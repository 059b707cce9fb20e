"""Command-line experiment harness.

Subcommands ``gen-data``, ``train``, ``meta`` and ``report`` share one run
directory. Every command stages its outputs, writes them atomically and
writes its manifest last, so a manifest exists only for a finished command.

Exit codes: 0 success, 2 configuration error, 3 missing input, 4 numerical
divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, config, kernels
from .dists import GaussianMixture, SampleSet, make_synthetic, partition_tasks, rng_from
from .errors import ConfigurationError, ContractViolation, DegenerateSupportError, NumericalError
from .gens import LayeredGenerator
from .meta import run_meta
from .metrics import generated_samples, report as creativity_report
from .objectives import (TrainResult, baseline_spec, evaluate_regime, fit_baseline, latent_explore,
                         train_maxdiv, train_param_divergence, train_ratio)
from .div import DivergenceConfig
from .support import build_support

log = logging.getLogger("divmax")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4
VOLATILE_KEYS = ("wall_clock",)


class MissingInput(Exception):
    pass


# ---------------------------------------------------------------- file helpers

def _atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _sha256(path: Path) -> str:
    return "sha256:" + hashlib.sha256(path.read_bytes()).hexdigest()


def _points_csv(P: np.ndarray) -> str:
    return SampleSet(P).to_csv()


def _json(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=False) + "\n"


class Stage:
    """Outputs of one command, written together once the command succeeds."""

    def __init__(self, out: Path, command: str, resolved: dict):
        self.out = out
        self.command = command
        self.resolved = resolved
        self.files: dict[str, str] = {}
        self.metrics: dict = {}
        self.notes: list[str] = []
        self.started = time.time()

    def add(self, rel: str, text: str):
        self.files[rel] = text

    def commit(self):
        for rel, text in self.files.items():
            _atomic_write(self.out / rel, text)
        run = dict(self.resolved["run"])
        run.pop("out_dir", None)
        resolved = {**self.resolved, "run": run}
        manifest = {
            "command": self.command,
            "tool_version": __version__,
            "kernel_backend": kernels.BACKEND,
            "config_digest": config.digest(self.resolved),
            "seeds": {
                "run": self.resolved["run"]["seed"],
                "data": self.resolved["data"]["seed"],
                "init": self.resolved["model"]["init_seed"],
            },
            "files": [{"path": rel, "sha256": _sha256(self.out / rel)} for rel in sorted(self.files)],
            "metrics": self.metrics,
            "notes": self.notes,
            "resolved_config": resolved,
            "wall_clock": {
                "started": datetime.fromtimestamp(self.started, timezone.utc).isoformat(),
                "seconds": round(time.time() - self.started, 3),
            },
        }
        _atomic_write(self.out / f"manifest_{self.command}.json", _json(manifest))
        return manifest


def manifest_equal(a: dict, b: dict) -> bool:
    """Manifest comparison that ignores wall-clock fields."""
    strip = lambda m: {k: v for k, v in m.items() if k not in VOLATILE_KEYS}  # noqa: E731
    return strip(a) == strip(b)


# ---------------------------------------------------------------- inputs

def _require(path: Path) -> Path:
    if not path.exists():
        raise MissingInput(f"missing input {path}")
    return path


def _load_data(out: Path) -> SampleSet:
    data = SampleSet.load(_require(out / "data.csv"), out / "data.json")
    lab = out / "labels.csv"
    if lab.exists():
        rows = lab.read_text().split("\n")[1:]
        labels = np.array([int(r) for r in rows if r])
        data = SampleSet(data.points, data.origin_seed, data.kind, labels)
    return data


def _load_generator(path: Path) -> LayeredGenerator:
    return LayeredGenerator.from_json(_require(path).read_text())


def _tasks(res: dict, data: SampleSet):
    part = res["data"].get("partition")
    if part is None:
        raise ConfigurationError("data/partition is required for ratio and meta runs")
    if part["subsample"] is not None and part["subsample"] < data.n:
        idx = np.sort(rng_from(part["seed"]).permutation(data.n)[:part["subsample"]])
        data = data.subset(idx)
    return partition_tasks(data, part["strategy"], part["seed"], part["k"])


def _mixture_json(g: GaussianMixture) -> str:
    return _json({"weights": g.weights.tolist(), "means": g.means.tolist(), "covariances": g.covariances.tolist()})


def _mixture_from_json(text: str) -> GaussianMixture:
    doc = json.loads(text)
    return GaussianMixture(np.array(doc["weights"]), np.array(doc["means"]), np.array(doc["covariances"]))


# ---------------------------------------------------------------- commands

def cmd_gen_data(res: dict, out: Path, jobs: int = 1) -> dict:
    d = res["data"]
    X = make_synthetic(d["kind"], d["params"], d["n"], d["seed"])
    st = Stage(out, "gen-data", res)
    st.add("data.csv", X.to_csv())
    st.add("data.json", _json(X.manifest()))
    if X.labels is not None:
        st.add("labels.csv", "label\n" + "".join(f"{int(v)}\n" for v in X.labels))
    st.metrics = {"N": X.n, "dim": X.dim, "mean": X.points.mean(0).tolist()}
    return st.commit()


def _trace_tail(result: TrainResult) -> dict:
    if not result.trace.records:
        return {"final_loss": None, "final_terms": {}}
    last = result.trace.records[-1]
    return {"final_step": last.step, "final_loss": last.loss,
            "final_terms": dict(zip(result.trace.term_names, last.terms))}


def cmd_train(res: dict, out: Path, jobs: int = 1) -> dict:
    data = _load_data(out)
    X = data.points
    o = res["objective"]
    mode = o["mode"]
    spec = config.objective_spec(res)
    tc = config.train_config(res)
    gen = config.generator(res, data.dim)
    st = Stage(out, "train", res)

    if mode == "baseline":
        result = fit_baseline(gen, X, spec, train=tc)
        result.regime = evaluate_regime(result.generator, X, spec, tc)
    else:
        if o["pretrain_steps"] > 0:
            pre = fit_baseline(gen, X, baseline_spec(DivergenceConfig.from_dict(o["divergence"])),
                               train=config.train_config(res, o["pretrain_steps"]))
            gen = pre.generator
            st.add("pretrained.json", gen.to_json())
            st.add("pretrain_trace.csv", pre.trace.to_csv())
        if mode == "maxdiv":
            result = train_maxdiv(gen, X, spec, train=tc)
        elif mode == "ratio":
            tasks = _tasks(res, data)
            result = train_ratio(gen, tasks, o["task_index"], spec, train=tc)
            result.regime = evaluate_regime(result.generator, X, spec, tc)
            num, den = (DivergenceConfig.from_dict(o[k]) for k in ("divergence", "denominator"))
            st.notes.append("ratio numerator and denominator use "
                            + ("the same divergence config" if num == den else "different divergence configs"))
        elif mode == "latent":
            result = latent_explore(gen, X, spec, train=tc)
            st.add("sampler.json", _mixture_json(result.sampler))
        else:
            layers = config.layer_set(o["layers"], gen)
            result = train_param_divergence(gen, gen.params, layers, spec, X, train=tc)
            result.regime = evaluate_regime(result.generator, X, spec, tc)
            st.metrics["layers"] = str(layers)

    st.add("checkpoint.json", result.generator.to_json())
    st.add("trace.csv", result.trace.to_csv())
    st.add("regime.json", result.regime.to_json())
    st.metrics.update({"mode": mode, **_trace_tail(result), "eval_initial": result.initial,
                       "eval_final": result.final, "precision": result.regime.precision,
                       "recall": result.regime.recall, "regime": result.regime.regime})
    return st.commit()


def cmd_meta(res: dict, out: Path, jobs: int = 1) -> dict:
    data = _load_data(out)
    tasks = _tasks(res, data)
    if len(tasks) < 2:
        raise ConfigurationError("meta runs need at least two tasks")
    o = res["objective"]
    gen = config.generator(res, data.dim)
    st = Stage(out, "meta", res)
    if o["pretrain_steps"] > 0:
        gen = fit_baseline(gen, data.points, baseline_spec(DivergenceConfig.from_dict(o["divergence"])),
                           train=config.train_config(res, o["pretrain_steps"])).generator
        st.add("pretrained.json", gen.to_json())
    spec = config.objective_spec({**res, "objective": {**o, "mode": "ratio"}})
    mk = config.meta_knowledge(res, len(tasks), gen)
    result = run_meta(tasks, gen, spec, config.episode_config(res), res["run"]["seed"], mk,
                      config.train_config(res), jobs=jobs)
    st.add("meta_trace.csv", result.trace_csv())
    width = len(str(len(tasks) - 1))
    for i, g in enumerate(result.generators):
        st.add(f"task_checkpoints/task_{i:0{width}d}.json", g.to_json())
    omega = result.meta.omega
    st.metrics = {"n_tasks": len(tasks), "outer_steps": len(result.trace), "final_omega": omega.tolist(),
                  "final_meta_loss": result.trace[-1].meta_loss,
                  "mean_initial_ratio": float(np.mean(result.initial_ratios)),
                  "mean_final_ratio": float(np.mean(result.final_ratios)),
                  "lambda_choice": result.meta.lambda_label()}
    st.notes.append("tasks are sampled uniformly from one fixed task collection")
    return st.commit()


def _hull_vertices(P: np.ndarray) -> np.ndarray | None:
    if P.shape[1] > 2:
        return None
    try:
        S = build_support(P, "convex_hull")
    except DegenerateSupportError:
        return None
    return S.vertices


def cmd_report(res: dict, out: Path, jobs: int = 1) -> dict:
    gen = _load_generator(out / "checkpoint.json")
    data = _load_data(out)
    prior = None
    if (out / "sampler.json").exists():
        prior = _mixture_from_json((out / "sampler.json").read_text())
    mcfg = config.metrics_config(res)
    rep = creativity_report(gen, data.points, mcfg, prior)
    st = Stage(out, "report", res)
    st.add("report.json", rep.to_json())
    st.add("samples_generated.csv", _points_csv(generated_samples(gen, mcfg, prior)))
    P = data.points
    if P.shape[0] > mcfg.n_samples:
        P = P[np.linspace(0, P.shape[0] - 1, mcfg.n_samples).round().astype(int)]
    st.add("samples_dataset.csv", _points_csv(P))
    hv = _hull_vertices(data.points)
    if hv is not None:
        st.add("hull_vertices.csv", _points_csv(hv))
    st.metrics = {k: v for k, v in rep.to_dict().items() if k not in ("configs", "regime")}
    st.metrics["regime"] = rep.regime.regime
    return st.commit()


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "meta": cmd_meta, "report": cmd_report}


# ---------------------------------------------------------------- entry point

def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("jobs must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="divmax", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", type=Path, required=name != "report", help="experiment config (JSON)")
        s.add_argument("--out", type=Path, help="run directory (overrides run.out_dir)")
        s.add_argument("--seed", type=_u64, help="run seed (overrides run.seed)")
        s.add_argument("--jobs", type=_positive, default=1, help="worker threads for independent episodes")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def _resolve_for(args) -> tuple[dict, Path]:
    if args.config is not None:
        doc = config.load(args.config)
        default_out = str(Path("runs") / args.config.stem)
        res = config.resolve(doc, args.seed, None if args.out is None else str(args.out), default_out)
        return res, Path(res["run"]["out_dir"])
    # report without --config: reuse the training run's resolved config
    if args.out is None:
        raise ConfigurationError("report needs --config or --out")
    out = args.out
    for name in ("manifest_train.json", "manifest_gen-data.json"):
        if (out / name).exists():
            res = json.loads((out / name).read_text())["resolved_config"]
            res["run"]["out_dir"] = str(out)
            if args.seed is not None:
                res["run"]["seed"] = args.seed
            return res, out
    raise MissingInput(f"no manifest in {out}; pass --config")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        res, out = _resolve_for(args)
        with np.errstate(over="ignore", invalid="ignore"):
            manifest = COMMANDS[args.command](res, out, args.jobs)
    except (MissingInput, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigurationError, ContractViolation, DegenerateSupportError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, FloatingPointError) as exc:
        print(f"error: numerical divergence: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(json.dumps(manifest["metrics"], indent=2))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
