"""Support estimates, membership, precision/recall and regime labels."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog
from scipy.spatial import ConvexHull, QhullError

from . import kernels
from .dists import SampleSet
from .errors import ConfigurationError, ContractViolation, DegenerateSupportError

HULL_TOL = 1e-9
METHODS = ("convex_hull", "knn_balls")
REGIMES = ("total_transfer", "total_extrapolation", "partial")


def _points(X) -> np.ndarray:
    return X.points if isinstance(X, SampleSet) else np.atleast_2d(np.asarray(X, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class SupportModel:
    """A support estimate.

    ``convex_hull`` keeps half-spaces ``A x + b <= 0`` for d <= 2 and answers
    membership by LP feasibility for larger d (or for degenerate sets built
    with ``allow_degenerate``). ``knn_balls`` keeps one ball per build point,
    radius = distance to its k-th neighbour.
    """

    variant: str
    points: np.ndarray
    equations: np.ndarray | None = None
    vertices: np.ndarray | None = None
    radii: np.ndarray | None = None
    k: int | None = None
    tol: float = HULL_TOL

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def n_facets(self) -> int | None:
        return None if self.equations is None else self.equations.shape[0]

    @property
    def uses_lp(self) -> bool:
        return self.variant == "convex_hull" and self.equations is None

    def margins(self, Q) -> np.ndarray:
        """Signed slack per query point, positive outside.

        Hull: largest half-space violation. Balls: ``min_j |q - c_j| - r_j``.
        Not available for LP-membership hulls.
        """
        Q = _points(Q)
        if self.variant == "knn_balls":
            return kernels.ball_margin(Q, self.points, self.radii)[0]
        if self.equations is None:
            raise ContractViolation("margins need an explicit hull (d <= 2, non-degenerate)")
        return (Q @ self.equations[:, :-1].T + self.equations[:, -1]).max(1)

    def contains_many(self, Q) -> np.ndarray:
        Q = _points(Q)
        if Q.shape[1] != self.dim:
            raise ContractViolation(f"query dimension {Q.shape[1]} != support dimension {self.dim}")
        if self.variant == "knn_balls":
            return self.margins(Q) <= self.tol
        if self.equations is not None:
            return self.margins(Q) <= self.tol
        return np.array([_lp_member(self.points, q, self.tol) for q in Q], dtype=bool)


def _lp_member(P, x, tol) -> bool:
    lo, hi = P.min(0), P.max(0)
    if np.any(x < lo - tol) or np.any(x > hi + tol):
        return False
    n = P.shape[0]
    A_eq = np.vstack([P.T, np.ones((1, n))])
    b_eq = np.concatenate([x, [1.0]])
    res = linprog(np.zeros(n), A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if res.status != 0:
        return False
    return bool(np.abs(A_eq @ res.x - b_eq).max() <= max(tol, 1e-7))


def _is_degenerate(P) -> bool:
    n, d = P.shape
    if n < d + 1:
        return True
    centered = P - P.mean(0)
    s = np.linalg.svd(centered, compute_uv=False)
    return s.size < d or s[-1] <= 1e-10 * max(1.0, s[0])


def build_support(X, method: str = "convex_hull", k: int = 3, tol: float = HULL_TOL,
                  allow_degenerate: bool = False) -> SupportModel:
    P = _points(X)
    n, d = P.shape
    if method == "knn_balls":
        if n <= k:
            raise DegenerateSupportError(f"knn_balls with k={k} needs more than {k} points")
        radii = kernels.knn_distances(P, P, k, exclude_self=True)[0][:, -1]
        return SupportModel("knn_balls", P.copy(), radii=radii, k=k, tol=tol)
    if method != "convex_hull":
        raise ConfigurationError(f"unknown support method {method!r}")
    if _is_degenerate(P):
        if allow_degenerate:
            return SupportModel("convex_hull", P.copy(), tol=tol)
        raise DegenerateSupportError(f"{n} points do not span R^{d}")
    if d == 1:
        lo, hi = P.min(), P.max()
        eq = np.array([[1.0, -hi], [-1.0, lo]])
        verts = np.array([[lo], [hi]])
        return SupportModel("convex_hull", P.copy(), eq, verts, tol=tol)
    if d == 2:
        try:
            hull = ConvexHull(P)
        except QhullError as exc:
            if allow_degenerate:
                return SupportModel("convex_hull", P.copy(), tol=tol)
            raise DegenerateSupportError(str(exc)) from exc
        return SupportModel("convex_hull", P.copy(), hull.equations.copy(), P[hull.vertices].copy(), tol=tol)
    return SupportModel("convex_hull", P.copy(), tol=tol)


def contains(S: SupportModel, x) -> bool:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ContractViolation("contains takes a single point; use contains_many")
    return bool(S.contains_many(x[None])[0])


@dataclass(frozen=True)
class RegimeReport:
    precision: float
    recall: float
    regime: str
    method: str
    tau_low: float = 0.05
    tau_high: float = 0.95

    def to_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "regime": self.regime,
            "method": self.method,
            "thresholds": {"tau_low": self.tau_low, "tau_high": self.tau_high},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "RegimeReport":
        th = doc.get("thresholds", {})
        return cls(doc["precision"], doc["recall"], doc["regime"], doc["method"],
                   th.get("tau_low", 0.05), th.get("tau_high", 0.95))


def precision_recall(U, P, method: str = "convex_hull", k: int = 3) -> tuple[float, float]:
    """Precision: share of ``U`` inside supp ``P``; recall: share of ``P`` inside supp ``U``.

    Degenerate hulls (e.g. a collapsed generator) fall back to exact LP membership.
    """
    U, P = _points(U), _points(P)
    if U.shape[1] != P.shape[1]:
        raise ContractViolation("dimension mismatch")
    supp_p = build_support(P, method, k=k, allow_degenerate=True)
    if method == "knn_balls" and U.shape[0] <= k:
        recall = 0.0
    else:
        supp_u = build_support(U, method, k=k, allow_degenerate=True)
        recall = float(supp_u.contains_many(P).mean())
    return float(supp_p.contains_many(U).mean()), recall


def classify_regime(precision: float, recall: float, tau_low: float = 0.05, tau_high: float = 0.95) -> str:
    if not 0.0 <= tau_low < tau_high <= 1.0:
        raise ConfigurationError("need 0 <= tau_low < tau_high <= 1")
    for v in (precision, recall):
        if not 0.0 <= v <= 1.0:
            raise ContractViolation("precision and recall must lie in [0, 1]")
    if precision <= tau_low and recall <= tau_low:
        return "total_transfer"
    if recall >= tau_high:
        return "total_extrapolation"
    return "partial"


def regime_report(U, P, method: str = "convex_hull", k: int = 3, tau_low=0.05, tau_high=0.95) -> RegimeReport:
    p, r = precision_recall(U, P, method, k)
    return RegimeReport(p, r, classify_regime(p, r, tau_low, tau_high), method, tau_low, tau_high)
