import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from divmax.dists import make_synthetic
from divmax.errors import ConfigurationError, ContractViolation, DegenerateSupportError
from divmax.support import (RegimeReport, build_support, classify_regime, contains, precision_recall,
                            regime_report)

DIAMOND = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])


class TestBuild:
    def test_square_has_four_facets(self):
        S = build_support(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]))
        assert S.n_facets == 4

    def test_collinear_degenerate(self):
        with pytest.raises(DegenerateSupportError):
            build_support(np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]))

    def test_too_few_points(self):
        with pytest.raises(DegenerateSupportError):
            build_support(np.array([[0.0, 0.0], [1.0, 0.0]]))

    def test_knn_radii_k1(self):
        P = np.random.default_rng(0).standard_normal((30, 2))
        S = build_support(P, "knn_balls", k=1)
        D = np.linalg.norm(P[:, None] - P[None], axis=-1)
        np.fill_diagonal(D, np.inf)
        np.testing.assert_allclose(S.radii, D.min(1), rtol=1e-12)

    def test_unknown_method(self):
        with pytest.raises(ConfigurationError):
            build_support(DIAMOND, "alpha_shape")


class TestContains:
    def test_diamond(self):
        S = build_support(DIAMOND)
        assert contains(S, [0.0, 0.0]) and not contains(S, [2.0, 2.0])

    @pytest.mark.parametrize("d", [2, 3, 4])
    def test_build_points_contained(self, d):
        P = np.random.default_rng(d).standard_normal((40, d))
        for method in ("convex_hull", "knn_balls"):
            assert build_support(P, method).contains_many(P).all()

    def test_lp_agrees_with_facets(self):
        P = np.random.default_rng(1).standard_normal((25, 2))
        Q = np.random.default_rng(2).uniform(-3, 3, (200, 2))
        exact = build_support(P)
        lp = build_support(np.column_stack([P, np.zeros(25)]), allow_degenerate=True)
        assert lp.uses_lp
        got = lp.contains_many(np.column_stack([Q, np.zeros(200)]))
        assert np.array_equal(got, exact.contains_many(Q))

    def test_dimension_checked(self):
        with pytest.raises(ContractViolation):
            contains(build_support(DIAMOND), [0.0, 0.0, 0.0])

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10**6), extra=st.integers(1, 20))
    def test_hull_monotone(self, seed, extra):
        rng = np.random.default_rng(seed)
        P = rng.standard_normal((15, 2))
        Q = rng.uniform(-3, 3, (100, 2))
        before = build_support(P).contains_many(Q)
        after = build_support(np.vstack([P, rng.standard_normal((extra, 2)) * 2])).contains_many(Q)
        assert not np.any(before & ~after)


class TestPrecisionRecall:
    def test_self(self):
        P = np.random.default_rng(0).standard_normal((200, 2))
        assert precision_recall(P, P) == (1.0, 1.0)

    def test_disjoint(self):
        P = np.random.default_rng(0).uniform(0, 1, (100, 2))
        assert precision_recall(P + 10.0, P) == (0.0, 0.0)

    @pytest.mark.xfail(strict=True, reason="the hull of 5000 standard normal points reaches radius ~3.5, "
                                           "so about 78% of N(0, 4I) falls inside")
    def test_wide_vs_narrow_stated_bound(self):
        rng = np.random.default_rng(3)
        U, P = rng.normal(0, 2, (5000, 2)), rng.normal(0, 1, (5000, 2))
        p, r = precision_recall(U, P)
        assert p < 0.6 and r > 0.95

    def test_wide_vs_narrow_area_oracle(self):
        # precision ~ P(|u| < r_eq) for u ~ N(0, 4I), with r_eq the radius of a disc of equal area
        from scipy.spatial import ConvexHull
        rng = np.random.default_rng(3)
        U, P = rng.normal(0, 2, (5000, 2)), rng.normal(0, 1, (5000, 2))
        p, r = precision_recall(U, P)
        r_eq = np.sqrt(ConvexHull(P).volume / np.pi)
        assert p == pytest.approx(1 - np.exp(-r_eq**2 / 8), abs=0.03)
        assert r > 0.95

    def test_collapsed_generator(self):
        P = np.random.default_rng(0).standard_normal((50, 2))
        p, r = precision_recall(np.zeros((20, 2)), P)
        assert p == 1.0 and r == 0.0


class TestRegime:
    @pytest.mark.parametrize("pr,label", [((0.0, 0.0), "total_transfer"), ((0.4, 0.99), "total_extrapolation"),
                                          ((0.5, 0.5), "partial")])
    def test_labels(self, pr, label):
        assert classify_regime(*pr) == label

    def test_bad_thresholds(self):
        with pytest.raises(ConfigurationError):
            classify_regime(0.5, 0.5, 0.9, 0.1)

    def test_json_round_trip(self):
        rep = regime_report(DIAMOND * 2, DIAMOND)
        assert RegimeReport.from_dict(rep.to_dict()) == rep
        assert set(rep.to_dict()) == {"precision", "recall", "regime", "method", "thresholds"}

    @pytest.mark.parametrize("method", ["convex_hull", "knn_balls"])
    def test_method_agreement_separated_cases(self, method):
        P = make_synthetic("ring", None, 300, 1).points
        assert regime_report(P + 10, P, method).regime == "total_transfer"
        assert regime_report(P, P, method).regime == "total_extrapolation"


def test_u_min_u_max_distinguished():
    P = make_synthetic("ring", {"radius": 1.0, "noise": 0.05}, 1000, 2).points
    ang = np.arctan2(P[:, 1], P[:, 0])
    u_min = P[np.abs(ang) < np.pi / 4]
    u_max = make_synthetic("ring", {"radius": 1.5, "noise": 0.05}, 1000, 3).points
    hi = regime_report(u_min, P).precision
    r_min = regime_report(u_min, P).recall
    r_max = regime_report(u_max, P).recall
    assert hi == 1.0
    assert r_max - r_min >= 0.3
