"""Layered generators ``x = g(z, eps)`` with a flat, layer-indexed parameter vector."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .dists import GaussianMixture, SampleSet, as_seed, check_simplex, rng_from
from .errors import ContractViolation

ACTIVATIONS = ("identity", "tanh")
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ParamLayout:
    """Layer ``l`` (1-based) owns ``values[spans[l-1][0]:spans[l-1][1]]``:
    its ``out x in`` weight matrix in row-major order, then its bias."""

    shapes: tuple[tuple[int, int], ...]

    @property
    def spans(self) -> tuple[tuple[int, int], ...]:
        out, start = [], 0
        for o, i in self.shapes:
            out.append((start, start + o * i + o))
            start += o * i + o
        return tuple(out)

    @property
    def size(self) -> int:
        return self.spans[-1][1]

    @property
    def n_layers(self) -> int:
        return len(self.shapes)

    def mask(self, layers: "LayerSet | None") -> np.ndarray:
        m = np.zeros(self.size, dtype=bool)
        ids = range(1, self.n_layers + 1) if layers is None else layers.ids
        for lid in ids:
            a, b = self.spans[lid - 1]
            m[a:b] = True
        return m


@dataclass(frozen=True)
class LayerSet:
    ids: tuple[int, ...]

    def __post_init__(self):
        ids = tuple(sorted(set(int(i) for i in self.ids)))
        if not ids:
            raise ContractViolation("a layer set must be nonempty")
        object.__setattr__(self, "ids", ids)

    @classmethod
    def all(cls, layout: ParamLayout) -> "LayerSet":
        return cls(tuple(range(1, layout.n_layers + 1)))

    @classmethod
    def last(cls, layout: ParamLayout) -> "LayerSet":
        return cls((layout.n_layers,))

    def check(self, layout: ParamLayout) -> "LayerSet":
        if self.ids[0] < 1 or self.ids[-1] > layout.n_layers:
            raise ContractViolation(f"layer ids {self.ids} outside 1..{layout.n_layers}")
        return self

    def __str__(self):
        return "+".join(str(i) for i in self.ids)


@dataclass(frozen=True, eq=False)
class ParamVector:
    values: np.ndarray
    layout: ParamLayout

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64).ravel()
        if v.size != self.layout.size:
            raise ContractViolation(f"{v.size} values for a layout of size {self.layout.size}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def with_values(self, values) -> "ParamVector":
        return ParamVector(values, self.layout)

    def layer(self, lid: int) -> tuple[np.ndarray, np.ndarray]:
        (o, i), (a, _) = self.layout.shapes[lid - 1], self.layout.spans[lid - 1]
        return self.values[a:a + o * i].reshape(o, i), self.values[a + o * i:a + o * i + o]


def _check_layout(a: ParamVector, b: ParamVector):
    if a.layout != b.layout:
        raise ContractViolation("parameter layouts differ")


def param_slice(phi: ParamVector, layers: LayerSet) -> np.ndarray:
    """Concatenated values of the spans in ``layers`` (ascending layer order)."""
    layers.check(phi.layout)
    return phi.values[phi.layout.mask(layers)].copy()


def write_slice(phi: ParamVector, layers: LayerSet, values) -> ParamVector:
    layers.check(phi.layout)
    m = phi.layout.mask(layers)
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (int(m.sum()),):
        raise ContractViolation(f"slice of length {values.size} does not fit {int(m.sum())} slots")
    out = phi.values.copy()
    out[m] = values
    return phi.with_values(out)


def interpolate_params(models: Sequence[ParamVector], omega, layers: LayerSet) -> ParamVector:
    """Weighted average of ``models`` on the spans in ``layers``; other spans
    are copied from ``models[0]``."""
    if not models:
        raise ContractViolation("no models to interpolate")
    for m in models[1:]:
        _check_layout(models[0], m)
    w = check_simplex(omega, "omega")
    if w.size != len(models):
        raise ContractViolation("one weight per model is required")
    layers.check(models[0].layout)
    mask = models[0].layout.mask(layers)
    stacked = np.stack([m.values for m in models])
    out = models[0].values.copy()
    out[mask] = (w @ stacked)[mask]
    return models[0].with_values(out)


@dataclass(frozen=True, eq=False)
class LayeredGenerator:
    """Stack of affine layers with identity or tanh activations.

    The input of the first layer is ``concat(z, eps)``.
    """

    params: ParamVector
    activations: tuple[str, ...]
    latent_dim: int
    noise_dim: int = 0

    def __post_init__(self):
        shapes = self.params.layout.shapes
        if len(self.activations) != len(shapes):
            raise ContractViolation("one activation per layer")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ContractViolation(f"unknown activation {a!r}")
        if shapes[0][1] != self.latent_dim + self.noise_dim:
            raise ContractViolation("first layer input must equal latent_dim + noise_dim")
        for (o, _), (_, i) in zip(shapes, shapes[1:]):
            if o != i:
                raise ContractViolation("consecutive layer shapes do not compose")
        object.__setattr__(self, "activations", tuple(self.activations))

    @property
    def layout(self) -> ParamLayout:
        return self.params.layout

    @property
    def out_dim(self) -> int:
        return self.layout.shapes[-1][0]

    @property
    def param_index(self) -> dict[int, tuple[int, int]]:
        return {lid + 1: span for lid, span in enumerate(self.layout.spans)}

    @property
    def layers(self):
        return [(*self.params.layer(l + 1), a) for l, a in enumerate(self.activations)]

    def with_params(self, params) -> "LayeredGenerator":
        if not isinstance(params, ParamVector):
            params = self.params.with_values(params)
        _check_layout(self.params, params)
        return LayeredGenerator(params, self.activations, self.latent_dim, self.noise_dim)

    @classmethod
    def build(cls, latent_dim: int, hidden: Iterable[int], out_dim: int, noise_dim: int = 0,
              hidden_activation="tanh", out_activation="identity", seed=0, scale=1.0) -> "LayeredGenerator":
        """Random init: weights ~ N(0, scale^2 / fan_in), biases 0."""
        dims = [latent_dim + noise_dim, *hidden, out_dim]
        shapes = tuple((dims[j + 1], dims[j]) for j in range(len(dims) - 1))
        rng = rng_from(seed)
        parts = []
        for o, i in shapes:
            parts.append(rng.standard_normal(o * i) * scale / np.sqrt(i))
            parts.append(np.zeros(o))
        acts = tuple([hidden_activation] * (len(shapes) - 1) + [out_activation])
        return cls(ParamVector(np.concatenate(parts), ParamLayout(shapes)), acts, latent_dim, noise_dim)

    @classmethod
    def from_layers(cls, layers, latent_dim: int, noise_dim: int = 0) -> "LayeredGenerator":
        """From an explicit list of ``(W, b, activation)`` triples."""
        shapes, parts, acts = [], [], []
        for W, b, a in layers:
            W = np.atleast_2d(np.asarray(W, dtype=np.float64))
            b = np.atleast_1d(np.asarray(b, dtype=np.float64))
            shapes.append(W.shape)
            parts += [W.ravel(), b]
            acts.append(a)
        return cls(ParamVector(np.concatenate(parts), ParamLayout(tuple(shapes))), tuple(acts), latent_dim, noise_dim)

    def _inputs(self, z, eps):
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        if z.shape[1] != self.latent_dim:
            raise ContractViolation(f"z has dimension {z.shape[1]}, expected {self.latent_dim}")
        if self.noise_dim:
            if eps is None:
                raise ContractViolation("this generator needs a noise input")
            eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
            if eps.shape != (z.shape[0], self.noise_dim):
                raise ContractViolation(f"eps has shape {eps.shape}, expected ({z.shape[0]}, {self.noise_dim})")
            return np.concatenate([z, eps], 1)
        if eps is not None and np.size(eps) != 0:
            raise ContractViolation("this generator takes no noise input")
        return z

    def forward(self, z, eps=None) -> np.ndarray:
        h = self._inputs(z, eps)
        for W, b, act in self.layers:
            h = h @ W.T + b
            if act == "tanh":
                h = np.tanh(h)
        return h

    def forward_tape(self, phi, z, eps=None) -> ad.Var:
        """Record the forward pass on a tape.

        ``phi`` is a tape Var over the flat parameter vector (or a plain array
        for frozen parameters, in which case ``z`` must be a Var).
        """
        tape = phi.tape if isinstance(phi, ad.Var) else z.tape
        if isinstance(z, ad.Var):
            if z.value.ndim != 2 or z.value.shape[1] != self.latent_dim:
                raise ContractViolation(f"z has shape {z.value.shape}, expected (n, {self.latent_dim})")
            h = z
            if self.noise_dim:
                h = ad.concat([z, tape.const(self._inputs(z.value, eps)[:, self.latent_dim:])], axis=1)
        else:
            h = tape.const(self._inputs(z, eps))
        if not isinstance(phi, ad.Var):
            phi = tape.const(getattr(phi, "values", phi))
        for (o, i), (a, _), act in zip(self.layout.shapes, self.layout.spans, self.activations):
            W = phi[a:a + o * i].reshape(o, i)
            b = phi[a + o * i:a + o * i + o]
            h = h @ W.T + b
            if act == "tanh":
                h = ad.tanh(h)
        return h

    def to_json(self) -> str:
        doc = {
            "format_version": FORMAT_VERSION,
            "latent_dim": self.latent_dim,
            "noise_dim": self.noise_dim,
            "layers": [{"shape": list(s), "activation": a} for s, a in zip(self.layout.shapes, self.activations)],
            "params": [float(v) for v in self.params.values],
        }
        return json.dumps(doc, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "LayeredGenerator":
        doc = json.loads(text)
        if doc.get("format_version") != FORMAT_VERSION:
            raise ContractViolation(f"unsupported checkpoint format {doc.get('format_version')}")
        layout = ParamLayout(tuple(tuple(l["shape"]) for l in doc["layers"]))
        return cls(ParamVector(np.array(doc["params"]), layout),
                   tuple(l["activation"] for l in doc["layers"]), doc["latent_dim"], doc["noise_dim"])


def generate(gen: LayeredGenerator, z, eps=None) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = gen.forward(z, eps)
    return out[0] if z.ndim == 1 else out


def draw_inputs(gen: LayeredGenerator, prior: GaussianMixture, n: int, seed):
    """Latent and noise draws used by :func:`push_samples` for ``seed``."""
    if n < 1:
        raise ContractViolation("n must be >= 1")
    if prior.dim != gen.latent_dim:
        raise ContractViolation(f"prior dimension {prior.dim} != latent_dim {gen.latent_dim}")
    rng = rng_from(seed)
    z_seed, eps_seed = rng.integers(0, 2**63, size=2)
    z, _ = prior.sample(n, z_seed)
    eps = rng_from(eps_seed).standard_normal((n, gen.noise_dim)) if gen.noise_dim else None
    return z, eps


def push_samples(gen: LayeredGenerator, prior: GaussianMixture, n: int, seed) -> SampleSet:
    z, eps = draw_inputs(gen, prior, n, seed)
    return SampleSet(gen.forward(z, eps), origin_seed=as_seed(seed), kind="generated")
