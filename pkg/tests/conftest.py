"""Shared, expensive training runs (computed once per session)."""

import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

SEEDS = (0, 1, 2)


@pytest.fixture(scope="session")
def ring_runs():
    """Per seed: a baseline fit on ring data, then unguarded and guarded maximization from it."""
    from divmax.dists import make_synthetic
    from divmax.gens import LayeredGenerator
    from divmax.objectives import TrainConfig, fit_baseline, maxdiv_spec, train_maxdiv

    X = make_synthetic("ring", {"radius": 1.0, "noise": 0.05}, 2000, 1)
    runs = []
    for seed in SEEDS:
        cfg = TrainConfig(seed=seed)
        base = fit_baseline(LayeredGenerator.build(2, [32, 32], 2, seed=seed), X, steps=1500, train=cfg)
        free = train_maxdiv(base.generator, X, maxdiv_spec(support_weight=0.0), steps=2000, train=cfg)
        guarded = train_maxdiv(base.generator, X, maxdiv_spec(support_weight=10.0), steps=2000, train=cfg)
        runs.append({"seed": seed, "X": X, "base": base, "free": free, "guarded": guarded})
    return runs


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
