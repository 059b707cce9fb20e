"""Sample-based divergence estimators.

Aggregated estimators compare two sample sets as distributions; point-wise
scores compare each sample with a reference on its own. ``mmd2`` and
``sliced_wasserstein`` have tape-recorded twins for training.
"""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.distance import pdist
from scipy.special import digamma, gammaln, logsumexp

from . import autodiff as ad
from . import kernels
from .dists import GaussianMixture, SampleSet, rng_from
from .errors import ConfigurationError, ContractViolation
from .gens import LayerSet, ParamVector

KINDS = ("mmd_rbf", "sliced_wasserstein", "kl_knn", "js_kde")
MODES = ("aggregated", "pointwise")
MEDIAN_POOL = 2000


@dataclass(frozen=True)
class DivergenceConfig:
    kind: str = "mmd_rbf"
    mode: str = "aggregated"
    bandwidth_rule: str = "median_heuristic"
    k: int = 5
    n_projections: int = 50
    seed: int = 0
    unbiased: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown divergence kind {self.kind!r}")
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown divergence mode {self.mode!r}")
        if self.k < 1 or self.n_projections < 1:
            raise ConfigurationError("k and n_projections must be >= 1")
        h = self.fixed_bandwidth
        if h is not None and not h > 0:
            raise ConfigurationError("fixed bandwidth must be > 0")

    @property
    def fixed_bandwidth(self) -> float | None:
        """``h`` for ``fixed(h)`` rules, else None."""
        if self.bandwidth_rule == "median_heuristic":
            return None
        m = re.fullmatch(r"fixed\(\s*([^)]+)\s*\)", str(self.bandwidth_rule))
        if not m:
            raise ConfigurationError(f"bandwidth_rule must be median_heuristic or fixed(h), got {self.bandwidth_rule!r}")
        try:
            return float(m.group(1))
        except ValueError as exc:
            raise ConfigurationError(f"bad bandwidth in {self.bandwidth_rule!r}") from exc

    def with_bandwidth(self, h: float) -> "DivergenceConfig":
        return DivergenceConfig(**{**asdict(self), "bandwidth_rule": f"fixed({h!r})"})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict | None) -> "DivergenceConfig":
        doc = dict(doc or {})
        rule = doc.get("bandwidth_rule")
        if isinstance(rule, dict) and "fixed" in rule:
            doc["bandwidth_rule"] = f"fixed({float(rule['fixed'])!r})"
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown divergence fields {sorted(unknown)}")
        return cls(**doc)


def _points(X) -> np.ndarray:
    return X.points if isinstance(X, SampleSet) else np.atleast_2d(np.asarray(X, dtype=np.float64))


def _check_dims(X, Y):
    if X.shape[1] != Y.shape[1]:
        raise ContractViolation(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")


def _canonical_stride(P, cap):
    # row-order independent subsample
    order = np.lexsort(P.T[::-1])
    step = max(1, math.ceil(P.shape[0] / cap))
    return P[order[::step]]


def median_bandwidth(X, Y=None) -> float:
    """Median pairwise distance of the pooled samples (at most ``MEDIAN_POOL`` of them)."""
    X = _points(X)
    pool = X if Y is None else np.concatenate([X, _points(Y)])
    pool = _canonical_stride(pool, MEDIAN_POOL)
    d = pdist(pool)
    d = d[d > 0]
    return float(np.median(d)) if d.size else 1.0


def resolve_bandwidth(cfg: DivergenceConfig, X, Y=None) -> float:
    h = cfg.fixed_bandwidth
    return h if h is not None else median_bandwidth(X, Y)


def _uniform(n):
    return np.full(n, 1.0 / n)


def _mmd_parts(X, Y, h, wy=None, unbiased=False, want_grad=True):
    gamma = 1.0 / (2.0 * h * h)
    n, m = X.shape[0], Y.shape[0]
    wy = _uniform(m) if wy is None else np.asarray(wy, dtype=np.float64)
    if unbiased:
        if n < 2 or m < 2:
            raise ContractViolation("the unbiased MMD needs at least two samples per side")
        wxx = np.full(n, 1.0 / math.sqrt(n * (n - 1)))
        wyy = wy * math.sqrt(m / (m - 1))
    else:
        wxx, wyy = _uniform(n), wy
    sxx, gxx = kernels.rbf_sum_grad(X, X, wxx, wxx, gamma, unbiased, want_grad, symmetric=True)
    sxy, gxy = kernels.rbf_sum_grad(X, Y, _uniform(n), wy, gamma, False, want_grad)
    syy, _ = kernels.rbf_sum_grad(Y, Y, wyy, wyy, gamma, unbiased, False, symmetric=True)
    value = sxx - 2.0 * sxy + syy
    grad = 2.0 * gxx - 2.0 * gxy if want_grad else None
    return value, grad, gamma, wy


def mmd2(X, Y, cfg: DivergenceConfig | None = None, weights=None) -> float:
    """Squared MMD with an RBF kernel ``exp(-|x - y|^2 / (2 h^2))``.

    ``weights`` optionally puts a weighted empirical measure on ``Y`` (used for
    mixtures of task datasets). The biased form is 0 on identical sets.
    """
    cfg = cfg or DivergenceConfig()
    X, Y = _points(X), _points(Y)
    _check_dims(X, Y)
    h = resolve_bandwidth(cfg, X, Y)
    value, _, _, _ = _mmd_parts(X, Y, h, weights, cfg.unbiased, want_grad=False)
    return float(value)


def mmd2_tape(X: ad.Var, Y, h: float, weights=None, unbiased=False) -> ad.Var:
    """Differentiable MMD^2 in ``X`` (and in ``Y`` when it is a Var), bandwidth fixed."""
    y_var = Y if isinstance(Y, ad.Var) else None
    Yv = Y.value if y_var is not None else _points(Y)
    _check_dims(X.value, Yv)
    value, gx, gamma, wy = _mmd_parts(X.value, Yv, h, weights, unbiased)
    inputs, vjps = [X], [lambda g: g * gx]
    if y_var is not None:
        n = X.value.shape[0]
        m = Yv.shape[0]
        wyy = wy * math.sqrt(m / (m - 1)) if unbiased else wy
        _, gyy = kernels.rbf_sum_grad(Yv, Yv, wyy, wyy, gamma, unbiased, True, symmetric=True)
        _, gyx = kernels.rbf_sum_grad(Yv, X.value, wy, _uniform(n), gamma, False, True)
        gy = 2.0 * gyy - 2.0 * gyx
        inputs.append(y_var)
        vjps.append(lambda g: g * gy)
    return X.tape.apply("mmd2_rbf", value, inputs, vjps)


def projections(d: int, n_projections: int, seed) -> np.ndarray:
    """Unit directions on the sphere, one per row."""
    if d == 1:
        return np.ones((1, 1))
    theta = rng_from(seed).standard_normal((n_projections, d))
    return theta / np.linalg.norm(theta, axis=1, keepdims=True)


def _match_counts(X, Y, seed):
    n, m = X.shape[0], Y.shape[0]
    if n == m:
        return X, Y
    rng = rng_from(seed)
    if n > m:
        return X[np.sort(rng.choice(n, m, replace=False))], Y
    return X, Y[np.sort(rng.choice(m, n, replace=False))]


def sliced_wasserstein(X, Y, cfg: DivergenceConfig | None = None) -> float:
    """Order-1 sliced Wasserstein distance over seeded random directions.

    Unequal sample counts are matched by seeded subsampling of the larger set.
    """
    cfg = cfg or DivergenceConfig(kind="sliced_wasserstein")
    X, Y = _points(X), _points(Y)
    _check_dims(X, Y)
    X, Y = _match_counts(X, Y, cfg.seed)
    theta = projections(X.shape[1], cfg.n_projections, cfg.seed)
    px = np.sort(X @ theta.T, axis=0)
    py = np.sort(Y @ theta.T, axis=0)
    return float(np.abs(px - py).mean())


def sliced_wasserstein_tape(X: ad.Var, Y, theta: np.ndarray) -> ad.Var:
    """Differentiable twin of :func:`sliced_wasserstein`; sort orders are frozen
    at their current values."""
    tape = X.tape
    Yv = Y.value if isinstance(Y, ad.Var) else _points(Y)
    if X.value.shape != Yv.shape:
        raise ContractViolation("the tape variant needs equal sample counts")
    cols = np.arange(theta.shape[0])[None, :]
    px = X @ theta.T
    py = (Y if isinstance(Y, ad.Var) else tape.const(Yv)) @ theta.T
    sx = px[np.argsort(px.value, axis=0), cols]
    sy = py[np.argsort(py.value, axis=0), cols]
    return ad.abs(sx - sy).mean()


def kl_knn(X, Y, k: int = 5) -> float:
    """k-NN estimate of KL(q || p) from ``X ~ q`` and ``Y ~ p``, in nats.

    ``d/n sum_i log(nu_k(i) / rho_k(i)) + log(m / (n - 1))`` where ``rho_k`` is
    the distance from ``x_i`` to its k-th neighbour in ``X`` (itself excluded)
    and ``nu_k`` the distance to its k-th neighbour in ``Y``.
    """
    X, Y = _points(X), _points(Y)
    _check_dims(X, Y)
    n, m = X.shape[0], Y.shape[0]
    if n <= k or m <= k:
        raise ContractViolation(f"kl_knn needs more than k={k} samples on each side")
    rho = kernels.knn_distances(X, X, k, exclude_self=True)[0][:, -1]
    nu = kernels.knn_distances(X, Y, k)[0][:, -1]
    tiny = np.finfo(np.float64).tiny
    d = X.shape[1]
    return float(d * np.mean(np.log(np.maximum(nu, tiny)) - np.log(np.maximum(rho, tiny))) + math.log(m / (n - 1)))


def knn_entropy(X, k: int = 5) -> float:
    """Kozachenko-Leonenko entropy estimate in nats; ``-inf`` when points coincide."""
    X = _points(X)
    n, d = X.shape
    if n <= k:
        raise ContractViolation(f"entropy estimate needs more than k={k} samples")
    eps = kernels.knn_distances(X, X, k, exclude_self=True)[0][:, -1]
    if np.any(eps <= 0):
        return float("-inf")
    log_unit_ball = 0.5 * d * math.log(math.pi) - gammaln(0.5 * d + 1)
    return float(digamma(n) - digamma(k) + log_unit_ball + d * np.mean(np.log(eps)))


def _kde_logpdf(points, data, h):
    d = data.shape[1]
    diff = points[:, None, :] - data[None, :, :]
    sq = np.einsum("ijk,ijk->ij", diff, diff) / (h * h)
    return logsumexp(-0.5 * sq, axis=1) - math.log(data.shape[0]) - 0.5 * d * math.log(2 * math.pi * h * h)


def js_kde(X, Y, cfg: DivergenceConfig | None = None) -> float:
    """Jensen-Shannon divergence between Gaussian KDEs, Monte Carlo over the samples.

    KDE bandwidth is Scott's factor times the pooled standard deviation unless
    the config fixes it. Bounded by ``ln 2``.
    """
    cfg = cfg or DivergenceConfig(kind="js_kde")
    X, Y = _points(X), _points(Y)
    _check_dims(X, Y)
    h = cfg.fixed_bandwidth
    if h is None:
        pool = np.concatenate([X, Y])
        n, d = pool.shape
        h = float(pool.std(0).mean()) * n ** (-1.0 / (d + 4)) or 1.0

    def half(A):
        la, lb = _kde_logpdf(A, X, h), _kde_logpdf(A, Y, h)
        lm = np.logaddexp(la, lb) - math.log(2)
        return la, lb, lm

    lx_p, _, lx_m = half(X)
    _, ly_q, ly_m = half(Y)
    return float(max(0.0, 0.5 * np.mean(lx_p - lx_m) + 0.5 * np.mean(ly_q - ly_m)))


def divergence(X, Y, cfg: DivergenceConfig, weights=None) -> float:
    """Aggregated ``D[X || Y]`` for the configured estimator."""
    if cfg.kind == "mmd_rbf":
        return mmd2(X, Y, cfg, weights)
    if weights is not None:
        Y = resample_weighted(Y, weights, _points(X).shape[0], cfg.seed)
    if cfg.kind == "sliced_wasserstein":
        return sliced_wasserstein(X, Y, cfg)
    if cfg.kind == "kl_knn":
        return kl_knn(X, Y, cfg.k)
    return js_kde(X, Y, cfg)


def resample_weighted(Y, weights, n, seed) -> np.ndarray:
    """Seeded draw of ``n`` rows of ``Y`` with probabilities ``weights``."""
    Y = _points(Y)
    w = np.asarray(weights, dtype=np.float64)
    idx = rng_from(seed).choice(Y.shape[0], size=n, p=w / w.sum())
    return Y[np.sort(idx)]


def pointwise_divergence(X, ref, cfg: DivergenceConfig | None = None) -> np.ndarray:
    """Per-sample scores: ``-log density`` against a mixture, or the distance to
    the nearest reference point against a sample set."""
    if cfg is not None and cfg.mode != "pointwise":
        raise ContractViolation("pointwise_divergence needs mode='pointwise'")
    X = _points(X)
    if isinstance(ref, GaussianMixture):
        return -ref.log_density(X)
    R = _points(ref)
    _check_dims(X, R)
    return kernels.knn_distances(X, R, 1)[0][:, 0]


def param_divergence(phi: ParamVector, theta: ParamVector, layers: LayerSet, sigma: float = 0.1) -> float:
    """KL between isotropic Gaussians of width ``sigma`` centred at the two
    point estimates, restricted to the spans of ``layers``."""
    if phi.layout != theta.layout:
        raise ContractViolation("parameter layouts differ")
    if not sigma > 0:
        raise ContractViolation("sigma must be > 0")
    mask = phi.layout.mask(layers.check(phi.layout))
    diff = phi.values[mask] - theta.values[mask]
    return float(diff @ diff / (2.0 * sigma * sigma))


def param_divergence_tape(phi: ad.Var, theta_values: np.ndarray, mask: np.ndarray, sigma: float) -> ad.Var:
    idx = np.flatnonzero(mask)
    diff = phi[idx] - theta_values[idx]
    return (diff * diff).sum() * (1.0 / (2.0 * sigma * sigma))
