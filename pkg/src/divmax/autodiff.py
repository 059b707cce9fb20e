"""Reverse-mode automatic differentiation on NumPy arrays, plus Adam.

A :class:`Tape` records array operations as they run. Each node keeps its
value and one vector-Jacobian product per input; :meth:`Tape.grad` sweeps
the nodes backwards from a scalar loss. Fused estimator ops (MMD, sliced
Wasserstein) register themselves through :meth:`Tape.apply`.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .errors import ContractViolation, NumericalError


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    value: np.ndarray
    vjps: tuple[Callable[[np.ndarray], np.ndarray], ...]


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(ax, keepdims=True)
    return g.reshape(shape)


class Var:
    __slots__ = ("tape", "id")
    __array_priority__ = 100

    def __init__(self, tape: "Tape", node_id: int):
        self.tape = tape
        self.id = node_id

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.id].value

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(id={self.id}, kind={self.tape.nodes[self.id].kind}, shape={self.shape})"

    def _lift(self, other):
        if isinstance(other, Var):
            if other.tape is not self.tape:
                raise ContractViolation("operands live on different tapes")
            return other
        return self.tape.const(other)

    def __add__(self, other):
        o = self._lift(other)
        a, b = self.shape, o.shape
        return self.tape.apply("add", self.value + o.value, (self, o),
                               (lambda g: _unbroadcast(g, a), lambda g: _unbroadcast(g, b)))

    __radd__ = __add__

    def __neg__(self):
        return self.tape.apply("neg", -self.value, (self,), (lambda g: -g,))

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) + (-self)

    def __mul__(self, other):
        o = self._lift(other)
        av, bv = self.value, o.value
        return self.tape.apply("mul", av * bv, (self, o),
                               (lambda g: _unbroadcast(g * bv, av.shape),
                                lambda g: _unbroadcast(g * av, bv.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = self._lift(other)
        av, bv = self.value, o.value
        return self.tape.apply("div", av / bv, (self, o),
                               (lambda g: _unbroadcast(g / bv, av.shape),
                                lambda g: _unbroadcast(-g * av / bv**2, bv.shape)))

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __pow__(self, p):
        if isinstance(p, Var):
            raise ContractViolation("only constant exponents are supported")
        v = self.value
        return self.tape.apply("pow", v**p, (self,), (lambda g: g * p * v ** (p - 1),))

    def __matmul__(self, other):
        o = self._lift(other)
        av, bv = self.value, o.value
        if av.ndim != 2 or bv.ndim != 2:
            raise ContractViolation("matmul is defined for 2-D operands only")
        return self.tape.apply("matmul", av @ bv, (self, o),
                               (lambda g: g @ bv.T, lambda g: av.T @ g))

    def __rmatmul__(self, other):
        return self._lift(other) @ self

    def __getitem__(self, idx):
        v = self.value

        def vjp(g):
            out = np.zeros_like(v)
            np.add.at(out, idx, g)
            return out

        return self.tape.apply("index", v[idx], (self,), (vjp,))

    @property
    def T(self):
        return self.tape.apply("transpose", self.value.T, (self,), (lambda g: g.T,))

    def reshape(self, *shape):
        old = self.shape
        return self.tape.apply("reshape", self.value.reshape(*shape), (self,), (lambda g: g.reshape(old),))

    def sum(self, axis=None, keepdims=False):
        v = self.value

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, v.shape).copy()

        return self.tape.apply("sum", np.asarray(v.sum(axis=axis, keepdims=keepdims)), (self,), (vjp,))

    def mean(self, axis=None, keepdims=False):
        n = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis, keepdims) * (1.0 / n)


class Tape:
    """Append-only record of operations; inputs always precede consumers."""

    def __init__(self):
        self.nodes: list[Node] = []

    def _push(self, kind, value, inputs, vjps) -> Var:
        self.nodes.append(Node(kind, inputs, np.asarray(value, dtype=np.float64), vjps))
        return Var(self, len(self.nodes) - 1)

    def var(self, value) -> Var:
        """A differentiable leaf."""
        return self._push("leaf", np.array(value, dtype=np.float64), (), ())

    def const(self, value) -> Var:
        return self._push("const", np.asarray(value, dtype=np.float64), (), ())

    def apply(self, kind: str, value, inputs: Sequence[Var], vjps: Sequence[Callable]) -> Var:
        """Record ``value = op(*inputs)`` with one VJP per input."""
        if len(inputs) != len(vjps):
            raise ContractViolation("one VJP per input is required")
        for v in inputs:
            if v.tape is not self:
                raise ContractViolation("input recorded on another tape")
        return self._push(kind, value, tuple(v.id for v in inputs), tuple(vjps))

    def grad(self, loss: Var, wrt):
        """Gradient of scalar ``loss`` with respect to one Var or a list of Vars."""
        if not isinstance(loss, Var) or loss.tape is not self or loss.id >= len(self.nodes):
            raise ContractViolation("loss is not recorded on this tape")
        if loss.value.size != 1:
            raise ContractViolation("loss must be a scalar")
        targets = [wrt] if isinstance(wrt, Var) else list(wrt)
        for t in targets:
            if t.tape is not self:
                raise ContractViolation("gradient target lives on another tape")
        adj: list[np.ndarray | None] = [None] * (loss.id + 1)
        adj[loss.id] = np.ones_like(loss.value)
        for nid in range(loss.id, -1, -1):
            g = adj[nid]
            if g is None:
                continue
            node = self.nodes[nid]
            for inp, vjp in zip(node.inputs, node.vjps):
                kind = self.nodes[inp].kind
                if kind == "const":
                    continue
                contrib = vjp(g)
                adj[inp] = contrib if adj[inp] is None else adj[inp] + contrib
        out = []
        for t in targets:
            g = adj[t.id] if t.id < len(adj) else None
            out.append(np.zeros_like(t.value) if g is None else g)
        return out[0] if isinstance(wrt, Var) else out


def tanh(x: Var) -> Var:
    y = np.tanh(x.value)
    return x.tape.apply("tanh", y, (x,), (lambda g: g * (1.0 - y * y),))


def exp(x: Var) -> Var:
    y = np.exp(x.value)
    return x.tape.apply("exp", y, (x,), (lambda g: g * y,))


def log(x: Var) -> Var:
    v = x.value
    return x.tape.apply("log", np.log(v), (x,), (lambda g: g / v,))


def sqrt(x: Var) -> Var:
    y = np.sqrt(x.value)
    return x.tape.apply("sqrt", y, (x,), (lambda g: g * 0.5 / y,))


def abs(x: Var) -> Var:  # noqa: A001 - mirrors numpy naming
    s = np.sign(x.value)
    return x.tape.apply("abs", np.abs(x.value), (x,), (lambda g: g * s,))


def softplus(x: Var) -> Var:
    v = x.value
    y = np.logaddexp(0.0, v)
    sig = 0.5 * (1.0 + np.tanh(0.5 * v))
    return x.tape.apply("softplus", y, (x,), (lambda g: g * sig,))


def max(x: Var, axis: int) -> Var:  # noqa: A001
    """Maximum along ``axis``; the gradient goes to the (first) argmax."""
    v = x.value
    arg = np.expand_dims(v.argmax(axis), axis)

    def vjp(g):
        out = np.zeros_like(v)
        np.put_along_axis(out, arg, np.expand_dims(g, axis), axis)
        return out

    return x.tape.apply("max", np.take_along_axis(v, arg, axis).squeeze(axis), (x,), (vjp,))


def concat(xs: Sequence[Var], axis: int = 0) -> Var:
    tape = xs[0].tape
    sizes = [x.shape[axis] for x in xs]
    edges = np.cumsum([0] + sizes)

    def make(j):
        sl = [slice(None)] * xs[0].value.ndim
        sl[axis] = slice(edges[j], edges[j + 1])
        return lambda g: g[tuple(sl)]

    return tape.apply("concat", np.concatenate([x.value for x in xs], axis), tuple(xs),
                      tuple(make(j) for j in range(len(xs))))


def tanh_clip(x: Var, bound: float) -> Var:
    """Soft bound ``bound * tanh(x / bound)``."""
    return tanh(x * (1.0 / bound)) * bound


@dataclass(frozen=True)
class OptimizerState:
    """Adam state. ``m``/``v`` are the first and second moment accumulators."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, n: int, lr=1e-2, beta1=0.9, beta2=0.999, eps=1e-8) -> "OptimizerState":
        return cls(np.zeros(n), np.zeros(n), 0, float(lr), float(beta1), float(beta2), float(eps))


def step(state: OptimizerState, params, g, direction: str = "minimize", mask=None):
    """One Adam update; returns ``(new_params, new_state)``.

    ``maximize`` is ``minimize`` on ``-g``. Entries where ``mask`` is False are
    left bitwise unchanged and their moments are not updated.
    """
    values = getattr(params, "values", params)
    values = np.asarray(values, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if g.shape != values.shape or state.m.shape != values.shape:
        raise ContractViolation(f"length mismatch: params {values.shape}, grad {g.shape}, state {state.m.shape}")
    if not np.all(np.isfinite(g)):
        raise NumericalError("non-finite gradient; the run diverged")
    if direction == "maximize":
        g = -g
    elif direction != "minimize":
        raise ContractViolation(f"direction must be minimize or maximize, got {direction!r}")
    t = state.t + 1
    m = state.beta1 * state.m + (1 - state.beta1) * g
    v = state.beta2 * state.v + (1 - state.beta2) * g * g
    mhat = m / (1 - state.beta1**t)
    vhat = v / (1 - state.beta2**t)
    update = state.lr * mhat / (np.sqrt(vhat) + state.eps)
    new = values - update
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        new = np.where(mask, new, values)
        m = np.where(mask, m, state.m)
        v = np.where(mask, v, state.v)
    new_state = replace(state, m=m, v=v, t=t)
    if hasattr(params, "with_values"):
        return params.with_values(new), new_state
    return new, new_state
