"""Minimal reverse-mode automatic differentiation over numpy arrays.

A ``Var`` wraps a float64 array and remembers how it was computed; calling
``backward`` on a scalar result accumulates exact gradients into every
reachable leaf. Supports the handful of operations the policy network and
PPO loss need: affine maps, tanh/sigmoid/exp/log, elementwise min, clip
with constant bounds, and reductions, all with numpy broadcasting.
"""

from __future__ import annotations

import numpy as np

from .errors import UsageError

__all__ = ["Var", "tanh", "sigmoid", "exp", "log", "minimum", "clip", "vsum", "mean", "backward"]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (the reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Var:
    """Node of the tape: a value plus the vector-Jacobian rule that made it."""

    __slots__ = ("value", "grad", "parents", "vjp")

    def __init__(self, value, parents=(), vjp=None):
        self.value = np.asarray(value, dtype=float)
        self.grad = None
        self.parents = parents
        self.vjp = vjp

    @property
    def shape(self):
        return self.value.shape

    # -- arithmetic ----------------------------------------------------
    def __add__(self, other):
        o = _as_var(other)
        return Var(
            self.value + o.value,
            (self, o),
            lambda g: (_unbroadcast(g, self.shape), _unbroadcast(g, o.shape)),
        )

    __radd__ = __add__

    def __neg__(self):
        return Var(-self.value, (self,), lambda g: (-g,))

    def __sub__(self, other):
        o = _as_var(other)
        return Var(
            self.value - o.value,
            (self, o),
            lambda g: (_unbroadcast(g, self.shape), _unbroadcast(-g, o.shape)),
        )

    def __rsub__(self, other):
        return _as_var(other) - self

    def __mul__(self, other):
        o = _as_var(other)
        return Var(
            self.value * o.value,
            (self, o),
            lambda g: (_unbroadcast(g * o.value, self.shape), _unbroadcast(g * self.value, o.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = _as_var(other)
        return Var(
            self.value / o.value,
            (self, o),
            lambda g: (
                _unbroadcast(g / o.value, self.shape),
                _unbroadcast(-g * self.value / o.value**2, o.shape),
            ),
        )

    def __rtruediv__(self, other):
        return _as_var(other) / self

    def __pow__(self, exponent: float):
        if isinstance(exponent, Var):
            raise UsageError("only constant exponents are supported")
        return Var(
            self.value**exponent,
            (self,),
            lambda g: (g * exponent * self.value ** (exponent - 1),),
        )

    def __matmul__(self, other):
        o = _as_var(other)
        return Var(
            self.value @ o.value,
            (self, o),
            lambda g: (g @ o.value.T, self.value.T @ g),
        )


def _as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(np.asarray(x, dtype=float))


def tanh(x: Var) -> Var:
    y = np.tanh(x.value)
    return Var(y, (x,), lambda g: (g * (1.0 - y**2),))


def sigmoid(x: Var) -> Var:
    # Stable in both tails.
    v = x.value
    y = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))), np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
    return Var(y, (x,), lambda g: (g * y * (1.0 - y),))


def exp(x: Var) -> Var:
    y = np.exp(x.value)
    return Var(y, (x,), lambda g: (g * y,))


def log(x: Var) -> Var:
    return Var(np.log(x.value), (x,), lambda g: (g / x.value,))


def minimum(a: Var, b: Var) -> Var:
    a, b = _as_var(a), _as_var(b)
    take_a = a.value <= b.value
    return Var(
        np.where(take_a, a.value, b.value),
        (a, b),
        lambda g: (
            _unbroadcast(np.where(take_a, g, 0.0), a.shape),
            _unbroadcast(np.where(take_a, 0.0, g), b.shape),
        ),
    )


def clip(x: Var, lo: float, hi: float) -> Var:
    inside = (x.value >= lo) & (x.value <= hi)
    return Var(np.clip(x.value, lo, hi), (x,), lambda g: (np.where(inside, g, 0.0),))


def vsum(x: Var, axis=None) -> Var:
    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return Var(x.value.sum(axis=axis), (x,), vjp)


def mean(x: Var, axis=None) -> Var:
    n = x.value.size if axis is None else x.value.shape[axis]
    return vsum(x, axis) * (1.0 / n)


def backward(root: Var) -> None:
    """Accumulate gradients of a scalar ``root`` into every reachable Var."""
    if root.value.size != 1:
        raise UsageError("backward expects a scalar root")
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))

    for node in order:
        node.grad = np.zeros_like(node.value)
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.vjp is None or node.grad is None:
            continue
        for parent, g in zip(node.parents, node.vjp(node.grad)):
            parent.grad = parent.grad + g if parent.grad is not None else g
