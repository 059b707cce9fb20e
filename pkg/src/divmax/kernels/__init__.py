"""Hot inner loops, compiled when possible.

The Cython extension ``_core`` is used when it imports; otherwise the NumPy
module ``_fallback`` provides the same functions. Set ``DIVMAX_PURE_PYTHON=1``
to force the fallback.

Functions
---------
rbf_sum_grad(A, B, wa, wb, gamma, exclude_diag, want_grad, symmetric)
    ``sum_ij wa_i wb_j exp(-gamma |a_i - b_j|^2)`` and its gradient in ``A``.
knn_distances(Q, R, k, exclude_self)
    Sorted distances and indices of the ``k`` nearest rows of ``R``.
ball_margin(Q, C, radii)
    ``min_j |q - c_j| - r_j`` per query, with the minimizing ball index.
"""

import os

import numpy as np

from . import _fallback

_force_py = os.environ.get("DIVMAX_PURE_PYTHON", "").strip() not in ("", "0")

if _force_py:
    _impl = _fallback
    BACKEND = "python"
else:
    try:
        from . import _core as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _fallback
        BACKEND = "python"


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def rbf_sum_grad(A, B, wa, wb, gamma, exclude_diag=False, want_grad=True, symmetric=False, impl=None):
    """``symmetric=True`` promises ``A == B`` and ``wa == wb`` (halves the work)."""
    impl = impl or _impl
    A, B = _f64(A), _f64(B)
    if symmetric and A.shape != B.shape:
        raise ValueError("symmetric needs A and B of equal shape")
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
        raise ValueError(f"incompatible shapes {A.shape} and {B.shape}")
    if exclude_diag and A.shape[0] != B.shape[0]:
        raise ValueError("exclude_diag needs a square Gram matrix")
    return impl.rbf_sum_grad(A, B, _f64(wa), _f64(wb), float(gamma),
                             bool(exclude_diag), bool(want_grad), bool(symmetric))


def knn_distances(Q, R, k, exclude_self=False, impl=None):
    impl = impl or _impl
    Q, R = _f64(Q), _f64(R)
    available = R.shape[0] - (1 if exclude_self else 0)
    if not 1 <= k <= available:
        raise ValueError(f"k={k} needs at least {k} reference points, have {available}")
    return impl.knn_distances(Q, R, int(k), bool(exclude_self))


def ball_margin(Q, C, radii, impl=None):
    impl = impl or _impl
    return impl.ball_margin(_f64(Q), _f64(C), _f64(radii))


__all__ = ["BACKEND", "rbf_sum_grad", "knn_distances", "ball_margin"]
