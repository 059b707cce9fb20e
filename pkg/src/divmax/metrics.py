"""Creativity-oriented scores for trained generators.

novelty
    aggregated divergence of generated samples from the inspiring set;
typicality
    ``exp(-novelty)``;
surprise entropy
    Kozachenko-Leonenko entropy of the outputs, either with ``z`` fixed and
    only the noise resampled or with both drawn from the prior;
variability ratio
    output variance from resampling the noise over the variance from
    resampling ``z``;
Bayesian surprise
    closed-form KL between single-Gaussian posterior and prior.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .dists import GaussianMixture, SampleSet, as_seed
from .div import DivergenceConfig, divergence, knn_entropy
from .errors import ConfigurationError, ContractViolation
from .gens import LayeredGenerator, draw_inputs
from .support import RegimeReport, regime_report

Z_MODES = ("fixed_z", "prior_z")
VAR_DELTA = 1e-12


def _points(X) -> np.ndarray:
    return X.points if isinstance(X, SampleSet) else np.atleast_2d(np.asarray(X, dtype=np.float64))


def novelty(U, inspiring, cfg: DivergenceConfig | None = None) -> float:
    return max(divergence(_points(U), _points(inspiring), cfg or DivergenceConfig()), 0.0)


def typicality(nov: float) -> float:
    return math.exp(-nov)


def _prior(gen, prior):
    return prior or GaussianMixture.standard_normal(gen.latent_dim)


def surprise_entropy(gen: LayeredGenerator, z_mode: str = "prior_z", n: int = 2000, k: int = 5,
                     seed=0, prior: GaussianMixture | None = None) -> float:
    """kNN entropy of generator outputs in nats; ``-inf`` flags a deterministic
    (zero-spread) output distribution."""
    if z_mode not in Z_MODES:
        raise ConfigurationError(f"z_mode must be one of {Z_MODES}")
    prior = _prior(gen, prior)
    if z_mode == "prior_z":
        z, eps = draw_inputs(gen, prior, n, seed)
    else:
        if gen.noise_dim == 0:
            raise ConfigurationError("fixed_z entropy needs a noise input (noise_dim >= 1)")
        z1, _ = draw_inputs(gen, prior, 1, seed)
        z = np.repeat(z1, n, axis=0)
        eps = np.random.default_rng([as_seed(seed), 1]).standard_normal((n, gen.noise_dim))
    return knn_entropy(gen.forward(z, eps), k)


def variability_ratio(gen: LayeredGenerator, n: int = 100, seed=0, prior: GaussianMixture | None = None,
                      per_group: int = 50) -> float:
    """Noise-driven over latent-driven output variance.

    Numerator: for ``n`` prior draws of ``z``, the total output variance over
    ``per_group`` fresh noise draws, averaged. Denominator: the same with the
    roles of ``z`` and noise swapped.
    """
    if gen.latent_dim < 1 or gen.noise_dim < 1:
        raise ConfigurationError("variability_ratio needs latent_dim >= 1 and noise_dim >= 1")
    if n < 1 or per_group < 2:
        raise ConfigurationError("need n >= 1 groups of per_group >= 2 draws")
    prior = _prior(gen, prior)
    m = n * per_group
    z, eps = draw_inputs(gen, prior, m, seed)
    z_fixed = np.repeat(z[:n], per_group, axis=0)
    eps_fixed = np.repeat(eps[:n], per_group, axis=0)
    z2, eps2 = draw_inputs(gen, prior, m, as_seed(seed) + 0x9E3779B97F4A7C15)
    d = gen.out_dim
    across_eps = gen.forward(z_fixed, eps2).reshape(n, per_group, d).var(axis=1).sum(-1).mean()
    across_z = gen.forward(z2, eps_fixed).reshape(n, per_group, d).var(axis=1).sum(-1).mean()
    return float(across_eps / (across_z + VAR_DELTA))


def _single(g: GaussianMixture) -> tuple[np.ndarray, np.ndarray]:
    if g.n_components != 1:
        raise ContractViolation("bayesian_surprise takes single-component Gaussians")
    return g.means[0], g.covariances[0]


def bayesian_surprise(prior: GaussianMixture, posterior: GaussianMixture) -> float:
    """``KL(posterior || prior)`` for two Gaussians, in nats."""
    m0, S0 = _single(prior)
    m1, S1 = _single(posterior)
    if m0.shape != m1.shape:
        raise ContractViolation("prior and posterior dimensions differ")
    d = m0.size
    L0 = np.linalg.cholesky(S0)
    L1 = np.linalg.cholesky(S1)
    A = np.linalg.solve(L0, L1)
    dm = np.linalg.solve(L0, m1 - m0)
    logdet = 2.0 * (np.log(np.diag(L0)).sum() - np.log(np.diag(L1)).sum())
    return max(float(0.5 * (np.sum(A * A) + dm @ dm - d + logdet)), 0.0)


def gaussian_fit(X) -> GaussianMixture:
    """Single Gaussian with the sample mean and (ridged) covariance of ``X``."""
    P = _points(X)
    cov = np.atleast_2d(np.cov(P, rowvar=False)) + 1e-9 * np.eye(P.shape[1])
    return GaussianMixture(np.ones(1), P.mean(0)[None], cov[None])


@dataclass(frozen=True)
class MetricsConfig:
    divergence: DivergenceConfig = field(default_factory=DivergenceConfig)
    n_samples: int = 1000
    entropy_mode: str = "prior_z"
    entropy_n: int = 2000
    entropy_k: int = 5
    variability_n: int = 100
    variability_per_group: int = 50
    support_method: str = "convex_hull"
    knn_k: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.entropy_mode not in Z_MODES:
            raise ConfigurationError(f"entropy_mode must be one of {Z_MODES}")
        if min(self.n_samples, self.entropy_n, self.variability_n) < 2 or self.entropy_k < 1:
            raise ConfigurationError("sample counts must be >= 2 and entropy_k >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["divergence"] = self.divergence.to_dict()
        return d

    @classmethod
    def from_dict(cls, doc: dict | None) -> "MetricsConfig":
        doc = dict(doc or {})
        doc["divergence"] = DivergenceConfig.from_dict(doc.get("divergence"))
        return cls(**doc)


@dataclass
class CreativityReport:
    novelty: float
    typicality: float
    surprise_entropy: float
    variability_ratio: float | None
    bayesian_surprise: float | None
    regime: RegimeReport
    configs: dict
    value: None = None

    @property
    def degenerate_deterministic(self) -> bool:
        return self.surprise_entropy == float("-inf")

    def to_dict(self) -> dict:
        ent = self.surprise_entropy
        return {
            "novelty": self.novelty,
            "typicality": self.typicality,
            "surprise_entropy": ent if math.isfinite(ent) else None,
            "degenerate_deterministic": self.degenerate_deterministic,
            "variability_ratio": self.variability_ratio,
            "bayesian_surprise": self.bayesian_surprise,
            "regime": self.regime.to_dict(),
            "configs": self.configs,
            "value": self.value,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def generated_samples(gen: LayeredGenerator, cfg: MetricsConfig, prior: GaussianMixture | None = None) -> np.ndarray:
    z, eps = draw_inputs(gen, _prior(gen, prior), cfg.n_samples, cfg.seed)
    return gen.forward(z, eps)


def report(gen: LayeredGenerator, inspiring, cfg: MetricsConfig | None = None,
           prior: GaussianMixture | None = None) -> CreativityReport:
    """Every score for ``gen`` against ``inspiring``.

    Bayesian surprise compares Gaussian fits: the generated samples play the
    posterior and the inspiring set the prior. ``value`` stays empty.
    """
    cfg = cfg or MetricsConfig()
    P = _points(inspiring)
    U = generated_samples(gen, cfg, prior)
    nov = novelty(U, P, cfg.divergence)
    mode = cfg.entropy_mode if gen.noise_dim > 0 else "prior_z"
    ent = surprise_entropy(gen, mode, cfg.entropy_n, cfg.entropy_k, cfg.seed, prior)
    var = variability_ratio(gen, cfg.variability_n, cfg.seed, prior, cfg.variability_per_group) if gen.noise_dim > 0 else None
    bs = bayesian_surprise(gaussian_fit(P), gaussian_fit(U)) if P.shape[0] > P.shape[1] else None
    reg = regime_report(U, P, cfg.support_method, cfg.knn_k)
    configs = cfg.to_dict()
    configs["entropy_mode"] = mode
    return CreativityReport(nov, typicality(nov), ent, var, bs, reg, configs)
