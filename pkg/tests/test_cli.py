import csv
import json
from pathlib import Path

import pytest

from divmax import cli, config

ROOT = Path(__file__).resolve().parents[1]

TINY_RUN = {"steps": 15, "batch_size": 32, "ref_batch": 32, "n_eval": 100, "log_interval": 5}
TINY_METRICS = {"n_samples": 100, "entropy_n": 100, "variability_n": 10, "variability_per_group": 5}


def write_config(tmp_path, doc, name="exp.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc, indent=2))
    return p


def tiny(mode="baseline", **objective):
    return {
        "data": {"kind": "gaussian_grid", "params": {"rows": 1, "cols": 3}, "n": 150,
                 "partition": {"strategy": "by_label"}},
        "model": {"latent_dim": 2, "hidden": [8], "noise_dim": 1},
        "objective": {"mode": mode, **objective},
        "meta": {"inner_steps": 3, "outer_steps": 2},
        "metrics": TINY_METRICS,
        "run": dict(TINY_RUN),
    }


def run(*argv):
    return cli.main([str(a) for a in argv])


def pipeline(tmp_path, doc, out):
    cfg = write_config(tmp_path, doc)
    assert run("gen-data", "--config", cfg, "--out", out) == 0
    return cfg


class TestGenData:
    def test_outputs(self, tmp_path):
        out = tmp_path / "r"
        pipeline(tmp_path, tiny(), out)
        text = (out / "data.csv").read_bytes().decode()
        assert text.startswith("x0,x1\n") and "\r" not in text and len(text.splitlines()) == 151
        meta = json.loads((out / "data.json").read_text())
        assert meta["N"] == 150 and meta["dim"] == 2
        man = json.loads((out / "manifest_gen-data.json").read_text())
        assert {f["path"] for f in man["files"]} == {"data.csv", "data.json", "labels.csv"}
        assert man["seeds"] == {"run": 0, "data": 0, "init": 0}

    def test_seed_flag_overrides(self, tmp_path):
        out = tmp_path / "r"
        cfg = write_config(tmp_path, tiny())
        assert run("gen-data", "--config", cfg, "--out", out, "--seed", 7) == 0
        man = json.loads((out / "manifest_gen-data.json").read_text())
        assert man["seeds"]["data"] == 7 and man["resolved_config"]["run"]["seed"] == 7

    def test_defaults_echoed(self, tmp_path):
        out = tmp_path / "r"
        pipeline(tmp_path, {"data": {"kind": "ring", "n": 30}}, out)
        res = json.loads((out / "manifest_gen-data.json").read_text())["resolved_config"]
        assert res["data"]["params"] == {"radius": 1.0, "noise": 0.05}
        assert res["objective"]["divergence"]["bandwidth_rule"] == "median_heuristic"
        assert res["run"]["lr"] == 0.01 and res["meta"]["perturbation"] == 0.1
        assert res["metrics"]["entropy_k"] == 5


@pytest.mark.parametrize("mode,extra,files", [
    ("baseline", {}, {"checkpoint.json", "trace.csv", "regime.json"}),
    ("maxdiv", {"pretrain_steps": 5, "guards": {"support_weight": 1.0}},
     {"checkpoint.json", "trace.csv", "regime.json", "pretrained.json", "pretrain_trace.csv"}),
    ("ratio", {"task_index": 1}, {"checkpoint.json", "trace.csv", "regime.json"}),
    ("latent", {"pretrain_steps": 5}, {"checkpoint.json", "trace.csv", "regime.json", "pretrained.json",
                                       "pretrain_trace.csv", "sampler.json"}),
    ("parameter", {"pretrain_steps": 5, "layers": [2]},
     {"checkpoint.json", "trace.csv", "regime.json", "pretrained.json", "pretrain_trace.csv"}),
])
def test_train_modes(tmp_path, mode, extra, files):
    out = tmp_path / "r"
    cfg = pipeline(tmp_path, tiny(mode, **extra), out)
    assert run("train", "--config", cfg, "--out", out) == 0
    man = json.loads((out / "manifest_train.json").read_text())
    assert {f["path"] for f in man["files"]} == files
    reg = json.loads((out / "regime.json").read_text())
    assert set(reg) == {"precision", "recall", "regime", "method", "thresholds"}
    rows = list(csv.reader((out / "trace.csv").open(newline="")))
    assert rows[0][:2] == ["step", "loss"] and len(rows) == 16
    assert run("report", "--out", out) == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["typicality"] > 0 and "novelty" in rep and rep["value"] is None


def test_meta_command(tmp_path):
    out = tmp_path / "r"
    cfg = pipeline(tmp_path, tiny("ratio"), out)
    assert run("meta", "--config", cfg, "--out", out, "--jobs", 2) == 0
    rows = list(csv.reader((out / "meta_trace.csv").open(newline="")))
    assert rows[0] == ["outer_step", "omega", "lambda_choice", "meta_loss"] and len(rows) == 3
    assert len(json.loads(rows[1][1])) == 3
    assert sorted(p.name for p in (out / "task_checkpoints").iterdir()) == ["task_0.json", "task_1.json", "task_2.json"]


def test_report_outputs(tmp_path):
    out = tmp_path / "r"
    cfg = pipeline(tmp_path, tiny(), out)
    assert run("train", "--config", cfg, "--out", out) == 0
    assert run("report", "--config", cfg, "--out", out) == 0
    names = {f["path"] for f in json.loads((out / "manifest_report.json").read_text())["files"]}
    assert names == {"report.json", "samples_generated.csv", "samples_dataset.csv", "hull_vertices.csv"}
    assert len((out / "samples_dataset.csv").read_text().splitlines()) == 101


class TestExitCodes:
    def test_bad_json_line(self, tmp_path, capsys):
        p = tmp_path / "bad.json"
        p.write_text('{\n  "data": {"kind": "ring",\n  "n": }\n}\n')
        assert run("gen-data", "--config", p, "--out", tmp_path / "r") == 2
        assert "bad.json:3:" in capsys.readouterr().err

    def test_schema_violation_line(self, tmp_path, capsys):
        p = tmp_path / "bad.json"
        p.write_text('{\n  "data": {\n    "kind": "ring",\n    "n": -5\n  }\n}\n')
        assert run("gen-data", "--config", p, "--out", tmp_path / "r") == 2
        err = capsys.readouterr().err
        assert "bad.json:4:" in err and "data/n" in err

    def test_unknown_key(self, tmp_path, capsys):
        p = write_config(tmp_path, {"data": {"kind": "ring", "n": 5}, "objectve": {}})
        assert run("gen-data", "--config", p, "--out", tmp_path / "r") == 2

    def test_no_partial_outputs(self, tmp_path):
        out = tmp_path / "r"
        p = write_config(tmp_path, {"data": {"kind": "ring", "n": 10, "params": {"radios": 1}}})
        assert run("gen-data", "--config", p, "--out", out) == 2
        assert not out.exists() or not any(out.iterdir())

    def test_missing_config(self, tmp_path):
        assert run("gen-data", "--config", tmp_path / "nope.json", "--out", tmp_path / "r") == 3

    def test_missing_data(self, tmp_path):
        cfg = write_config(tmp_path, tiny())
        assert run("train", "--config", cfg, "--out", tmp_path / "empty") == 3

    def test_report_without_checkpoint(self, tmp_path):
        out = tmp_path / "r"
        cfg = pipeline(tmp_path, tiny(), out)
        assert run("report", "--config", cfg, "--out", out) == 3

    def test_numerical_divergence(self, tmp_path):
        out = tmp_path / "r"
        doc = tiny("maxdiv", guards={"bound": None})
        doc["run"]["lr"] = 1e307
        cfg = pipeline(tmp_path, doc, out)
        assert run("train", "--config", cfg, "--out", out) == 4
        assert not (out / "manifest_train.json").exists() and not (out / "checkpoint.json").exists()

    def test_bad_layer_id(self, tmp_path):
        out = tmp_path / "r"
        cfg = pipeline(tmp_path, tiny("parameter", layers=[9]), out)
        assert run("train", "--config", cfg, "--out", out) == 2

    def test_ratio_needs_partition(self, tmp_path):
        out = tmp_path / "r"
        doc = tiny("ratio")
        del doc["data"]["partition"]
        cfg = pipeline(tmp_path, doc, out)
        assert run("train", "--config", cfg, "--out", out) == 2


def test_reproducible_manifests(tmp_path):
    doc = tiny("maxdiv", pretrain_steps=5)
    cfg = write_config(tmp_path, doc)
    mans = []
    for name in ("a", "b"):
        out = tmp_path / name
        for cmd in ("gen-data", "train", "report"):
            assert run(cmd, "--config", cfg, "--out", out) == 0
        mans.append({c: json.loads((out / f"manifest_{c}.json").read_text()) for c in ("gen-data", "train", "report")})
    for c in mans[0]:
        assert cli.manifest_equal(mans[0][c], mans[1][c])
    assert mans[0]["train"]["wall_clock"] != {}


@pytest.mark.parametrize("path", sorted((ROOT / "configs").glob("*.json")), ids=lambda p: p.stem)
def test_presets_resolve(path):
    res = config.resolve(config.load(path))
    config.objective_spec(res)
    config.episode_config(res)
    config.metrics_config(res)
