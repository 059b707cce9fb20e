import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import divmax.kernels as K
from _util import BACKENDS, rbf_oracle


@pytest.fixture(params=BACKENDS)
def impl(request):
    return request.param


def _data(seed, n=37, m=29, d=3):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, d)), rng.normal(size=(m, d)), rng.random(n), rng.random(m)


def test_rbf_matches_dense_oracle(impl):
    A, B, wa, wb = _data(0)
    s, g = K.rbf_sum_grad(A, B, wa, wb, 0.7, impl=impl)
    s0, g0 = rbf_oracle(A, B, wa, wb, 0.7)
    assert s == pytest.approx(s0, rel=1e-12)
    np.testing.assert_allclose(g, g0, rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("exclude", [False, True])
def test_rbf_symmetric_path_agrees_with_full(impl, exclude):
    A, _, wa, _ = _data(1)
    full = K.rbf_sum_grad(A, A, wa, wa, 0.4, exclude_diag=exclude, impl=impl)
    sym = K.rbf_sum_grad(A, A, wa, wa, 0.4, exclude_diag=exclude, symmetric=True, impl=impl)
    oracle = rbf_oracle(A, A, wa, wa, 0.4, exclude)
    assert sym[0] == pytest.approx(oracle[0], rel=1e-12)
    assert full[0] == pytest.approx(oracle[0], rel=1e-12)
    np.testing.assert_allclose(sym[1], oracle[1], rtol=1e-10, atol=1e-12)


def test_rbf_without_gradient(impl):
    A, B, wa, wb = _data(2)
    s, g = K.rbf_sum_grad(A, B, wa, wb, 1.0, want_grad=False, impl=impl)
    assert s == pytest.approx(rbf_oracle(A, B, wa, wb, 1.0)[0], rel=1e-12)
    assert g is None or g.size == 0


def test_knn_matches_brute_force(impl):
    rng = np.random.default_rng(3)
    Q, R = rng.normal(size=(50, 2)), rng.normal(size=(80, 2))
    dist, idx = K.knn_distances(Q, R, 4, impl=impl)
    full = np.sqrt(((Q[:, None] - R[None]) ** 2).sum(-1))
    np.testing.assert_allclose(dist, np.sort(full, 1)[:, :4], rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(np.take_along_axis(full, idx, 1), dist, rtol=1e-12, atol=1e-12)


def test_knn_exclude_self_skips_own_row(impl):
    rng = np.random.default_rng(4)
    P = rng.normal(size=(40, 3))
    _, idx = K.knn_distances(P, P, 3, exclude_self=True, impl=impl)
    assert not np.any(idx == np.arange(40)[:, None])


def test_ball_margin_oracle(impl):
    rng = np.random.default_rng(5)
    Q, C, r = rng.normal(size=(30, 2)), rng.normal(size=(20, 2)), rng.random(20) * 0.3
    m, arg = K.ball_margin(Q, C, r, impl=impl)
    full = np.sqrt(((Q[:, None] - C[None]) ** 2).sum(-1)) - r[None]
    np.testing.assert_allclose(m, full.min(1), rtol=1e-12, atol=1e-12)
    np.testing.assert_array_equal(arg, full.argmin(1))


def test_backends_agree_bitwise_on_knn_indices():
    if len(BACKENDS) < 2:
        pytest.skip("compiled core not built")
    rng = np.random.default_rng(6)
    Q, R = rng.normal(size=(200, 2)), rng.normal(size=(300, 2))
    a = K.knn_distances(Q, R, 5, impl=BACKENDS[0].values[0])
    b = K.knn_distances(Q, R, 5, impl=BACKENDS[1].values[0])
    np.testing.assert_array_equal(a[1], b[1])
    np.testing.assert_allclose(a[0], b[0], rtol=1e-12)


def test_k_out_of_range_rejected():
    P = np.zeros((3, 2))
    with pytest.raises(ValueError):
        K.knn_distances(P, P, 3, exclude_self=True)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 12), m=st.integers(1, 12), d=st.integers(1, 4),
       gamma=st.floats(0.01, 5.0), seed=st.integers(0, 2**32 - 1))
def test_rbf_property_against_oracle(n, m, d, gamma, seed):
    rng = np.random.default_rng(seed)
    A, B = rng.normal(size=(n, d)), rng.normal(size=(m, d))
    wa, wb = rng.random(n), rng.random(m)
    s0, g0 = rbf_oracle(A, B, wa, wb, gamma)
    for p in BACKENDS:
        s, g = K.rbf_sum_grad(A, B, wa, wb, gamma, impl=p.values[0])
        assert s == pytest.approx(s0, rel=1e-10, abs=1e-14)
        np.testing.assert_allclose(g, g0, rtol=1e-8, atol=1e-12)
