"""NumPy implementations of the compiled kernels.

Same signatures and results as ``_core``; used when the extension is not
built or when ``DIVMAX_PURE_PYTHON=1`` is set.
"""

import numpy as np

_CHUNK = 512


def _sqdist(A, B):
    d2 = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.maximum(d2, 0.0)


def _sqdist_exact(A, B):
    diff = A[:, None, :] - B[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def rbf_sum_grad(A, B, wa, wb, gamma, exclude_diag=False, want_grad=True, symmetric=False):
    total = 0.0
    grad = np.zeros_like(A) if want_grad else None
    for s in range(0, A.shape[0], _CHUNK // 4):
        a = A[s:s + _CHUNK // 4]
        K = np.exp(-gamma * _sqdist_exact(a, B)) * wb[None, :]
        if exclude_diag:
            rows = np.arange(a.shape[0])
            K[rows, rows + s] = 0.0
        total += float(wa[s:s + a.shape[0]] @ K.sum(1))
        if want_grad:
            coef = -2.0 * gamma * wa[s:s + a.shape[0], None] * K
            grad[s:s + a.shape[0]] = coef.sum(1)[:, None] * a - coef @ B
    return total, grad


def knn_distances(Q, R, k, exclude_self=False):
    nq = Q.shape[0]
    dist = np.empty((nq, k))
    idx = np.empty((nq, k), dtype=np.intp)
    for s in range(0, nq, _CHUNK):
        q = Q[s:s + _CHUNK]
        D = _sqdist(q, R)
        if exclude_self:
            rows = np.arange(q.shape[0])
            D[rows, rows + s] = np.inf
        if k < R.shape[0]:
            part = np.argpartition(D, k - 1, axis=1)[:, :k]
        else:
            part = np.tile(np.arange(R.shape[0]), (q.shape[0], 1))
        vals = np.take_along_axis(D, part, 1)
        order = np.argsort(vals, axis=1, kind="stable")
        part = np.take_along_axis(part, order, 1)
        # recompute exactly on the selected pairs to match the compiled path
        diff = q[:, None, :] - R[part]
        exact = np.einsum("ijk,ijk->ij", diff, diff)
        order = np.argsort(exact, axis=1, kind="stable")
        idx[s:s + _CHUNK] = np.take_along_axis(part, order, 1)
        dist[s:s + _CHUNK] = np.sqrt(np.take_along_axis(exact, order, 1))
    return dist, idx


def ball_margin(Q, C, radii):
    margin = np.empty(Q.shape[0])
    arg = np.empty(Q.shape[0], dtype=np.intp)
    for s in range(0, Q.shape[0], _CHUNK // 4):
        q = Q[s:s + _CHUNK // 4]
        M = np.sqrt(_sqdist_exact(q, C)) - radii[None, :]
        a = M.argmin(1)
        arg[s:s + q.shape[0]] = a
        margin[s:s + q.shape[0]] = M[np.arange(q.shape[0]), a]
    return margin, arg
