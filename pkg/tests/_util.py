import numpy as np
import pytest

from divmax.kernels import _fallback

try:
    from divmax.kernels import _core
except ImportError:  # extension not built
    _core = None

BACKENDS = [pytest.param(_fallback, id="numpy")]
if _core is not None:
    BACKENDS.append(pytest.param(_core, id="cython"))


def majority(flags) -> bool:
    flags = [bool(f) for f in flags]
    return 2 * sum(flags) > len(flags)


def rbf_oracle(A, B, wa, wb, gamma, exclude_diag=False):
    """Dense reference for the kernel sum and its gradient in A."""
    d2 = ((A[:, None, :] - B[None, :, :]) ** 2).sum(-1)
    K = np.exp(-gamma * d2) * wa[:, None] * wb[None, :]
    if exclude_diag:
        np.fill_diagonal(K, 0.0)
    grad = -2.0 * gamma * (K.sum(1)[:, None] * A - K @ B)
    return K.sum(), grad
