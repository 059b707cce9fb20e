import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad
from scipy.stats import norm

from divmax import autodiff as ad
from divmax.dists import GaussianMixture
from divmax.div import (DivergenceConfig, divergence, js_kde, kl_knn, mmd2, mmd2_tape, param_divergence,
                        pointwise_divergence, projections, sliced_wasserstein, sliced_wasserstein_tape)
from divmax.errors import ConfigurationError, ContractViolation
from divmax.gens import LayerSet, LayeredGenerator

from _util import majority, rbf_oracle

SW = DivergenceConfig(kind="sliced_wasserstein")


def normal(n, d=1, mu=0.0, sd=1.0, seed=0):
    return np.random.default_rng(seed).normal(mu, sd, (n, d))


def grid_kl(p, q):
    f = lambda x: p.pdf(x) * (p.logpdf(x) - q.logpdf(x))  # noqa: E731
    return quad(f, -60, 60, limit=400)[0]


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(kind="tv"), dict(mode="both"), dict(k=0), dict(n_projections=0),
                                    dict(bandwidth_rule="fixed(0)"), dict(bandwidth_rule="silverman")])
    def test_invalid(self, kw):
        with pytest.raises(ConfigurationError):
            DivergenceConfig(**kw)

    def test_fixed_bandwidth_parsed(self):
        assert DivergenceConfig(bandwidth_rule="fixed(0.5)").fixed_bandwidth == 0.5
        assert DivergenceConfig.from_dict({"bandwidth_rule": {"fixed": 2}}).fixed_bandwidth == 2.0


class TestMMD:
    def test_identical_sets_zero(self):
        X = normal(300, 2)
        assert abs(mmd2(X, X.copy())) < 1e-12

    def test_symmetric(self):
        X, Y = normal(200, 2, seed=1), normal(150, 2, 0.5, seed=2)
        assert mmd2(X, Y) == pytest.approx(mmd2(Y, X), rel=1e-12)

    def test_row_permutation(self):
        X, Y = normal(200, 2, seed=1), normal(150, 2, 0.5, seed=2)
        perm = np.random.default_rng(3).permutation(150)
        assert mmd2(X, Y[perm]) == pytest.approx(mmd2(X, Y), rel=1e-12)

    def test_matches_brute_force(self):
        X, Y = normal(40, 2, seed=1), normal(30, 2, 1.0, seed=2)
        h = 0.8
        g = 1 / (2 * h * h)
        wx, wy = np.full(40, 1 / 40), np.full(30, 1 / 30)
        expect = (rbf_oracle(X, X, wx, wx, g, False)[0] - 2 * rbf_oracle(X, Y, wx, wy, g, False)[0]
                  + rbf_oracle(Y, Y, wy, wy, g, False)[0])
        assert mmd2(X, Y, DivergenceConfig(bandwidth_rule="fixed(0.8)")) == pytest.approx(expect, rel=1e-12)

    def test_monotone_in_shift(self):
        def increasing(seed):
            vals = [mmd2(normal(2000, seed=seed), normal(2000, mu=m, seed=seed + 100), DivergenceConfig(bandwidth_rule="fixed(1.0)"))
                    for m in (0.5, 1.0, 2.0)]
            return vals[0] < vals[1] < vals[2]
        assert majority([increasing(s) for s in range(5)])

    def test_weighted_equals_duplicated_rows(self):
        X, Y = normal(50, 2, seed=1), normal(4, 2, seed=2)
        cfg = DivergenceConfig(bandwidth_rule="fixed(1.0)")
        w = np.array([0.5, 0.25, 0.125, 0.125])
        dup = np.repeat(Y, [4, 2, 1, 1], axis=0)
        assert mmd2(X, Y, cfg, weights=w) == pytest.approx(mmd2(X, dup, cfg), rel=1e-12)

    def test_unbiased_near_zero_on_same_distribution(self):
        cfg = DivergenceConfig(unbiased=True, bandwidth_rule="fixed(1.0)")
        assert abs(mmd2(normal(1000, seed=1), normal(1000, seed=2), cfg)) < 5e-3

    def test_dim_mismatch(self):
        with pytest.raises(ContractViolation):
            mmd2(normal(10, 2), normal(10, 3))


class TestSlicedWasserstein:
    def test_identical_zero(self):
        X = normal(100, 3)
        assert sliced_wasserstein(X, X.copy(), SW) < 1e-12

    def test_translated_1d(self):
        assert sliced_wasserstein(normal(5000, seed=1), normal(5000, mu=1.0, seed=2), SW) == pytest.approx(1.0, abs=0.05)

    def test_common_translation(self):
        X, Y = normal(300, 2, seed=1), normal(300, 2, 1.0, seed=2)
        t = np.array([5.0, -3.0])
        assert sliced_wasserstein(X + t, Y + t, SW) == pytest.approx(sliced_wasserstein(X, Y, SW), abs=1e-12)

    def test_symmetric_and_deterministic(self):
        X, Y = normal(300, 2, seed=1), normal(300, 2, 1.0, seed=2)
        assert sliced_wasserstein(X, Y, SW) == pytest.approx(sliced_wasserstein(Y, X, SW), abs=1e-12)
        assert sliced_wasserstein(X, Y, SW) == sliced_wasserstein(X, Y, SW)

    def test_unit_projections(self):
        np.testing.assert_allclose(np.linalg.norm(projections(4, 20, 0), axis=1), 1.0, atol=1e-12)


class TestKLKnn:
    def test_zero_kl_2d(self):
        assert abs(kl_knn(normal(10000, 2, seed=1), normal(10000, 2, seed=2), 5)) < 0.05

    @pytest.mark.parametrize("mu,kl", [(0.0, 0.0), (1.0, 0.5), (2.0, 2.0)])
    def test_translated_1d(self, mu, kl):
        est = kl_knn(normal(10000, seed=1), normal(10000, mu=mu, seed=2), 5)
        assert abs(est - kl) <= max(0.15 * kl, 0.05)

    def test_rotation_invariant(self):
        X, Y = normal(500, 2, seed=1), normal(500, 2, 0.7, seed=2)
        a = 0.7
        R = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
        assert kl_knn(X @ R.T, Y @ R.T) == pytest.approx(kl_knn(X, Y), abs=1e-9)

    def test_asymmetric(self):
        p, q = normal(10000, seed=1), normal(10000, sd=3.0, seed=2)
        assert abs(kl_knn(p, q) - kl_knn(q, p)) > 0.3

    def test_narrow_vs_wide_against_grid_oracle(self):
        oracle = grid_kl(norm(0, 1), norm(0, 3))
        assert oracle == pytest.approx(math.log(3) + 1 / 18 - 0.5, abs=1e-8)
        assert kl_knn(normal(10000, seed=1), normal(10000, sd=3.0, seed=2)) == pytest.approx(oracle, rel=0.15)

    @pytest.mark.xfail(strict=True, reason="kNN KL converges slowly when q is much wider than p "
                                           "(about 1.5 vs 2.90 at n=10000)")
    def test_wide_vs_narrow_against_grid_oracle(self):
        oracle = grid_kl(norm(0, 3), norm(0, 1))
        assert kl_knn(normal(10000, sd=3.0, seed=2), normal(10000, seed=1)) == pytest.approx(oracle, rel=0.15)

    def test_needs_more_than_k(self):
        with pytest.raises(ContractViolation):
            kl_knn(normal(5), normal(100), 5)


class TestJS:
    def test_bounds(self):
        assert js_kde(normal(300, seed=1), normal(300, seed=1)) < 1e-9
        far = js_kde(normal(300, seed=1), normal(300, mu=50.0, seed=2), DivergenceConfig(kind="js_kde", bandwidth_rule="fixed(0.3)"))
        assert far == pytest.approx(math.log(2), abs=1e-6)


@pytest.mark.parametrize("kind", ["mmd_rbf", "sliced_wasserstein", "kl_knn", "js_kde"])
def test_identity_of_indiscernibles(kind):
    X = normal(200, 2, seed=4)
    # kl_knn counts each point as its own neighbour in Y, so it is only bounded
    val = divergence(X, X.copy(), DivergenceConfig(kind=kind))
    if kind == "kl_knn":
        assert abs(val) < 0.5
    else:
        assert abs(val) < 1e-9


class TestPointwise:
    def test_equal_point_scores_zero(self):
        R = normal(20, 2)
        assert np.all(pointwise_divergence(R[:5], R) == 0)

    def test_permutation_equivariant(self):
        X, R = normal(30, 2, seed=1), normal(20, 2, seed=2)
        perm = np.random.default_rng(0).permutation(30)
        np.testing.assert_array_equal(pointwise_divergence(X[perm], R), pointwise_divergence(X, R)[perm])

    def test_permuted_vs_shifted(self):
        R = normal(100, 2, seed=1)
        assert pointwise_divergence(R[::-1], R).mean() == 0
        assert pointwise_divergence(R + 0.5, R).mean() > 0

    def test_against_mixture_is_negative_log_density(self):
        g = GaussianMixture.standard_normal(2)
        np.testing.assert_allclose(pointwise_divergence(np.zeros((1, 2)), g), [math.log(2 * math.pi)], rtol=1e-12)

    def test_mode_checked(self):
        with pytest.raises(ContractViolation):
            pointwise_divergence(normal(3), normal(3), DivergenceConfig())


def test_aggregated_vs_pointwise_separation():
    # a permutation of the data matches as a set but not index by index
    R = normal(200, 2, seed=5)
    U = R[np.random.default_rng(1).permutation(200)]
    assert mmd2(U, R) < 1e-6
    assert np.linalg.norm(U - R, axis=1).mean() > 0.5


class TestParamDivergence:
    def gens(self):
        g = LayeredGenerator.build(1, [3], 1, seed=0)
        return g, g.params

    def test_zero_at_identity(self):
        _, th = self.gens()
        assert param_divergence(th, th, LayerSet((1, 2))) == 0

    def test_single_coordinate(self):
        _, th = self.gens()
        v = th.values.copy()
        v[-1] += 0.1
        assert param_divergence(th.with_values(v), th, LayerSet((2,)), 0.1) == pytest.approx(0.5, abs=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 1000))
    def test_monotone_in_layer_set(self, seed):
        _, th = self.gens()
        phi = th.with_values(th.values + np.random.default_rng(seed).standard_normal(th.values.size))
        assert param_divergence(phi, th, LayerSet((1, 2))) >= param_divergence(phi, th, LayerSet((2,)))

    def test_layout_mismatch(self):
        _, th = self.gens()
        other = LayeredGenerator.build(1, [4], 1).params
        with pytest.raises(ContractViolation):
            param_divergence(th, other, LayerSet((1,)))


def _fd(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


@pytest.mark.parametrize("seed", range(5))
def test_mmd_tape_gradient(seed):
    rng = np.random.default_rng(seed)
    X, Y = rng.standard_normal((12, 2)), rng.standard_normal((9, 2)) + 0.5
    tape = ad.Tape()
    xv = tape.var(X)
    g = tape.grad(mmd2_tape(xv, Y, 0.9), xv).ravel()
    num = _fd(lambda v: mmd2(v.reshape(12, 2), Y, DivergenceConfig(bandwidth_rule="fixed(0.9)")), X.ravel())
    np.testing.assert_allclose(g, num, rtol=1e-5, atol=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_sliced_tape_gradient(seed):
    rng = np.random.default_rng(seed)
    X, Y = rng.standard_normal((10, 2)), rng.standard_normal((10, 2)) + 0.5
    theta = projections(2, 7, seed)
    cfg = DivergenceConfig(kind="sliced_wasserstein", n_projections=7, seed=seed)
    tape = ad.Tape()
    xv = tape.var(X)
    out = sliced_wasserstein_tape(xv, Y, theta)
    assert out.value == pytest.approx(sliced_wasserstein(X, Y, cfg), abs=1e-12)
    g = tape.grad(out, xv).ravel()
    num = _fd(lambda v: sliced_wasserstein(v.reshape(10, 2), Y, cfg), X.ravel(), 1e-7)
    np.testing.assert_allclose(g, num, rtol=1e-4, atol=1e-8)
