"""Reference densities, synthetic datasets and task partitions."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigurationError, ContractViolation

SIMPLEX_TOL = 1e-9


def as_seed(seed) -> int:
    """Reduce any integer seed to an unsigned 64-bit value."""
    return int(seed) % (1 << 64)


def rng_from(seed) -> np.random.Generator:
    return np.random.default_rng(as_seed(seed))


def check_simplex(w, name="weights") -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise ContractViolation(f"{name} must be a non-empty vector")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ContractViolation(f"{name} must be finite and nonnegative")
    if abs(w.sum() - 1.0) > SIMPLEX_TOL:
        raise ContractViolation(f"{name} sum to {w.sum():.12g}, not 1")
    return w


@dataclass(frozen=True, eq=False)
class SampleSet:
    """``N`` points in ``R^d``.

    ``labels`` is an optional integer tag per row (cluster ids from
    :func:`make_synthetic`), used by the ``by_label`` partition.
    """

    points: np.ndarray
    origin_seed: int | None = None
    kind: str | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] < 1:
            raise ContractViolation(f"SampleSet needs an N x d array with N, d >= 1, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ContractViolation("SampleSet rows must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.labels is not None:
            lab = np.array(self.labels)
            if lab.shape != (pts.shape[0],):
                raise ContractViolation("labels must have one entry per row")
            lab.setflags(write=False)
            object.__setattr__(self, "labels", lab)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self):
        return self.n

    def subset(self, idx) -> "SampleSet":
        labels = None if self.labels is None else self.labels[idx]
        return SampleSet(self.points[idx], self.origin_seed, self.kind, labels)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([f"x{j}" for j in range(self.dim)])
        for row in self.points:
            writer.writerow([repr(float(v)) for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, **kw) -> "SampleSet":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows:
            raise ContractViolation("empty CSV")
        header = rows[0]
        if header != [f"x{j}" for j in range(len(header))]:
            raise ContractViolation(f"unexpected CSV header {header}")
        return cls(np.array([[float(v) for v in r] for r in rows[1:] if r]), **kw)

    def manifest(self) -> dict:
        return {"dim": self.dim, "N": self.n, "seed": self.origin_seed, "kind": self.kind}

    def save(self, csv_path: Path, manifest_path: Path | None = None):
        Path(csv_path).write_text(self.to_csv(), newline="")
        if manifest_path is not None:
            Path(manifest_path).write_text(json.dumps(self.manifest(), indent=2) + "\n")

    @classmethod
    def load(cls, csv_path: Path, manifest_path: Path | None = None) -> "SampleSet":
        kw = {}
        if manifest_path is not None and Path(manifest_path).exists():
            meta = json.loads(Path(manifest_path).read_text())
            kw = {"origin_seed": meta.get("seed"), "kind": meta.get("kind")}
        return cls.from_csv(Path(csv_path).read_text(), **kw)


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    _chol: np.ndarray = field(init=False, repr=False)
    _logdet: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        w = check_simplex(self.weights)
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        cov = np.asarray(self.covariances, dtype=np.float64)
        if cov.ndim == 2:
            cov = cov[None]
        k, d = mu.shape
        if w.size != k or cov.shape != (k, d, d):
            raise ContractViolation(f"inconsistent mixture shapes: w{w.shape} mu{mu.shape} cov{cov.shape}")
        if not np.allclose(cov, np.swapaxes(cov, 1, 2), atol=1e-12):
            raise ContractViolation("covariances must be symmetric")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ContractViolation("covariances must be positive definite") from exc
        for name, arr in (("weights", w), ("means", mu), ("covariances", cov), ("_chol", chol)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(1)
        object.__setattr__(self, "_logdet", logdet)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @classmethod
    def standard_normal(cls, d: int) -> "GaussianMixture":
        return cls(np.ones(1), np.zeros((1, d)), np.eye(d)[None])

    @classmethod
    def isotropic(cls, mean, std) -> "GaussianMixture":
        mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        return cls(np.ones(1), mean[None], (std**2 * np.eye(mean.size))[None])

    def log_density(self, x) -> np.ndarray:
        """Log density at one point (returns a float) or at rows of an array."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        X = np.atleast_2d(x)
        if X.shape[1] != self.dim:
            raise ContractViolation(f"point dimension {X.shape[1]} != mixture dimension {self.dim}")
        comps = np.empty((X.shape[0], self.n_components))
        for j in range(self.n_components):
            sol = np.linalg.solve(self._chol[j], (X - self.means[j]).T)
            maha = (sol * sol).sum(0)
            comps[:, j] = -0.5 * (maha + self._logdet[j] + self.dim * np.log(2 * np.pi))
        with np.errstate(divide="ignore"):
            out = logsumexp(comps + np.log(self.weights), axis=1)
        return float(out[0]) if single else out

    def sample(self, n: int, seed) -> tuple[np.ndarray, np.ndarray]:
        if n < 1:
            raise ContractViolation("n must be >= 1")
        rng = rng_from(seed)
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        eps = rng.standard_normal((n, self.dim))
        pts = self.means[comp] + np.einsum("nij,nj->ni", self._chol[comp], eps)
        return pts, comp


def gmm_log_density(gmm: GaussianMixture, x) -> float:
    return gmm.log_density(x)


def gmm_sample(gmm: GaussianMixture, n: int, seed) -> SampleSet:
    pts, comp = gmm.sample(n, seed)
    return SampleSet(pts, origin_seed=as_seed(seed), kind="gmm", labels=comp)


def _grid(params, n, seed):
    rows = int(params.get("rows", 2))
    cols = int(params.get("cols", 2))
    spacing = float(params.get("spacing", 4.0))
    std = float(params.get("std", 0.5))
    if rows < 1 or cols < 1 or spacing <= 0 or std <= 0:
        raise ConfigurationError("gaussian_grid needs rows, cols >= 1 and spacing, std > 0")
    ys, xs = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    centers = np.stack([xs.ravel() - (cols - 1) / 2, ys.ravel() - (rows - 1) / 2], 1) * spacing
    k = rows * cols
    gmm = GaussianMixture(np.full(k, 1.0 / k), centers, np.repeat((std**2 * np.eye(2))[None], k, 0))
    return gmm.sample(n, seed)


def _ring(params, n, seed):
    radius = float(params.get("radius", 1.0))
    noise = float(params.get("noise", 0.05))
    if radius <= 0 or noise < 0:
        raise ConfigurationError("ring needs radius > 0 and noise >= 0")
    rng = rng_from(seed)
    angle = rng.uniform(0.0, 2 * np.pi, n)
    r = radius + noise * rng.standard_normal(n)
    return np.stack([r * np.cos(angle), r * np.sin(angle)], 1), None


def _two_moons(params, n, seed):
    noise = float(params.get("noise", 0.05))
    rng = rng_from(seed)
    lab = rng.integers(0, 2, n)
    t = rng.uniform(0.0, np.pi, n)
    pts = np.where(
        lab[:, None] == 0,
        np.stack([np.cos(t), np.sin(t)], 1),
        np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], 1),
    )
    return pts + noise * rng.standard_normal((n, 2)), lab


SYNTHETIC_KINDS = {"gaussian_grid": _grid, "ring": _ring, "two_moons": _two_moons}
SYNTHETIC_DEFAULTS = {
    "gaussian_grid": {"rows": 2, "cols": 2, "spacing": 4.0, "std": 0.5},
    "ring": {"radius": 1.0, "noise": 0.05},
    "two_moons": {"noise": 0.05},
}


def synthetic_params(kind: str, params: dict | None) -> dict:
    """``params`` merged over the documented defaults of ``kind``; unknown keys are rejected."""
    if kind not in SYNTHETIC_KINDS:
        raise ConfigurationError(f"unknown synthetic kind {kind!r}; expected one of {sorted(SYNTHETIC_KINDS)}")
    extra = set(params or {}) - set(SYNTHETIC_DEFAULTS[kind])
    if extra:
        raise ConfigurationError(f"unknown {kind} parameters: {sorted(extra)}")
    return {**SYNTHETIC_DEFAULTS[kind], **(params or {})}


def make_synthetic(kind: str, params: dict | None, n: int, seed) -> SampleSet:
    """Draw ``n`` points from a documented 2-D family.

    gaussian_grid
        ``rows x cols`` equal-weight isotropic Gaussians (``std``) centred on a
        grid with ``spacing``, grid centred at the origin. Labels are cell ids.
    ring
        Uniform angle, radius ``radius + noise * N(0, 1)``.
    two_moons
        Two interleaved half circles plus isotropic ``noise``; labels are moons.
    """
    params = synthetic_params(kind, params)
    if n < 1:
        raise ConfigurationError("n must be >= 1")
    pts, labels = SYNTHETIC_KINDS[kind](params, int(n), seed)
    return SampleSet(pts, origin_seed=as_seed(seed), kind=kind, labels=labels)


@dataclass(frozen=True, eq=False)
class TaskCollection:
    tasks: tuple[SampleSet, ...]
    omega: np.ndarray
    labels: tuple[str, ...] | None = None

    def __post_init__(self):
        tasks = tuple(self.tasks)
        if not tasks:
            raise ContractViolation("a task collection needs at least one task")
        if len({t.dim for t in tasks}) != 1:
            raise ContractViolation("all tasks must share a dimension")
        omega = check_simplex(self.omega, "omega")
        if omega.size != len(tasks):
            raise ContractViolation("omega length must equal the task count")
        omega = omega.copy()
        omega.setflags(write=False)
        object.__setattr__(self, "tasks", tasks)
        object.__setattr__(self, "omega", omega)
        if self.labels is not None and len(self.labels) != len(tasks):
            raise ContractViolation("one label per task")

    def __len__(self):
        return len(self.tasks)

    @property
    def dim(self) -> int:
        return self.tasks[0].dim

    def with_omega(self, omega) -> "TaskCollection":
        return TaskCollection(self.tasks, omega, self.labels)

    def leave_one_out(self, i: int, omega=None) -> np.ndarray:
        """Weights over tasks with task ``i`` removed and the rest renormalized."""
        if len(self.tasks) < 2:
            raise ConfigurationError("leave-one-out mixture is empty for a single-task collection")
        if not 0 <= i < len(self.tasks):
            raise ConfigurationError(f"task index {i} out of range for {len(self.tasks)} tasks")
        w = np.array(self.omega if omega is None else omega, dtype=np.float64)
        w[i] = 0.0
        total = w.sum()
        if total <= 0:
            raise ContractViolation("leave-one-out weights vanish")
        return w / total

    def all_points(self) -> np.ndarray:
        return np.concatenate([t.points for t in self.tasks])


def partition_tasks(data: SampleSet | Sequence[SampleSet], strategy: str, seed=0, k: int | None = None) -> TaskCollection:
    """Split data into a task collection with uniform mixture weights.

    ``random_k`` shuffles and cuts into ``k`` near-equal tasks, ``by_label``
    groups rows by label (a list input is taken as already grouped), and
    ``atomic`` makes one task per point.
    """
    if not isinstance(data, SampleSet):
        groups = list(data)
        if strategy != "by_label":
            data = SampleSet(np.concatenate([g.points for g in groups]),
                             labels=np.concatenate([np.full(g.n, j) for j, g in enumerate(groups)]))
        else:
            tags = tuple(str(j) for j in range(len(groups)))
            return TaskCollection(tuple(groups), np.full(len(groups), 1.0 / len(groups)), tags)

    if strategy == "random_k":
        if k is None or k < 1:
            raise ConfigurationError("random_k needs k >= 1")
        if k > data.n:
            raise ConfigurationError(f"k={k} exceeds the {data.n} available points")
        perm = rng_from(seed).permutation(data.n)
        parts = [data.subset(np.sort(p)) for p in np.array_split(perm, k)]
        tags = tuple(f"part{j}" for j in range(k))
    elif strategy == "by_label":
        if data.labels is None:
            raise ConfigurationError("by_label needs labelled data")
        values = np.unique(data.labels)
        parts = [data.subset(np.flatnonzero(data.labels == v)) for v in values]
        tags = tuple(str(v) for v in values)
    elif strategy == "atomic":
        parts = [data.subset(np.array([j])) for j in range(data.n)]
        tags = tuple(f"point{j}" for j in range(data.n))
    else:
        raise ConfigurationError(f"unknown partition strategy {strategy!r}")
    return TaskCollection(tuple(parts), np.full(len(parts), 1.0 / len(parts)), tags)
