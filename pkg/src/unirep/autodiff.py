"""Minimal reverse-mode differentiation over numpy arrays.

Only the handful of operations needed to re-express the training losses are
provided. It is deliberately separate from the hand-derived backward passes
in :mod:`unirep.encoder` and :mod:`unirep.losses` so the two can be checked
against each other.

    >>> x = Var(np.array([1.0, 2.0]))
    >>> y = (x * x).sum()
    >>> y.backward()
    >>> x.grad
    array([2., 4.])
"""
from __future__ import annotations

import numpy as np


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _lift(x):
    return x if isinstance(x, Var) else Var(np.asarray(x, dtype=np.float64))


class Var:
    __array_priority__ = 100

    def __init__(self, value, parents=(), name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents  # tuple of (Var, fn(upstream) -> grad contribution)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, name={self.name!r})"

    # -- graph traversal --------------------------------------------------
    def backward(self, upstream=None):
        if upstream is None:
            upstream = np.ones_like(self.value)
        order, seen = [], set()

        def visit(node):
            if id(node) in seen:
                return
            seen.add(id(node))
            for parent, _ in node.parents:
                visit(parent)
            order.append(node)

        visit(self)
        grads = {id(self): np.asarray(upstream, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            for parent, fn in node.parents:
                contrib = fn(g)
                key = id(parent)
                grads[key] = contrib if key not in grads else grads[key] + contrib

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        other = _lift(other)
        return Var(
            self.value + other.value,
            (
                (self, lambda g: _unbroadcast(g, self.shape)),
                (other, lambda g: _unbroadcast(g, other.shape)),
            ),
        )

    __radd__ = __add__

    def __neg__(self):
        return Var(-self.value, ((self, lambda g: -g),))

    def __sub__(self, other):
        return self + (-_lift(other))

    def __rsub__(self, other):
        return _lift(other) + (-self)

    def __mul__(self, other):
        other = _lift(other)
        return Var(
            self.value * other.value,
            (
                (self, lambda g: _unbroadcast(g * other.value, self.shape)),
                (other, lambda g: _unbroadcast(g * self.value, other.shape)),
            ),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _lift(other)
        return self * other.reciprocal()

    def __rtruediv__(self, other):
        return _lift(other) * self.reciprocal()

    def __matmul__(self, other):
        other = _lift(other)
        a, b = self.value, other.value
        if a.ndim != 2 or b.ndim not in (1, 2):
            raise ValueError("matmul supports 2-D @ 1-D or 2-D @ 2-D only")
        if b.ndim == 1:
            return Var(a @ b, ((self, lambda g: np.outer(g, b)), (other, lambda g: a.T @ g)))
        return Var(a @ b, ((self, lambda g: g @ b.T), (other, lambda g: a.T @ g)))

    def __getitem__(self, idx):
        shape = self.shape

        def fn(g):
            out = np.zeros(shape)
            np.add.at(out, idx, g)
            return out

        return Var(self.value[idx], ((self, fn),))

    # -- elementwise ------------------------------------------------------
    def reciprocal(self):
        out = 1.0 / self.value
        return Var(out, ((self, lambda g: -g * out * out),))

    def exp(self):
        out = np.exp(self.value)
        return Var(out, ((self, lambda g: g * out),))

    def log(self):
        v = self.value
        return Var(np.log(v), ((self, lambda g: g / v),))

    def tanh(self):
        out = np.tanh(self.value)
        return Var(out, ((self, lambda g: g * (1.0 - out * out)),))

    def sqrt(self):
        out = np.sqrt(self.value)
        return Var(out, ((self, lambda g: g * 0.5 / out),))

    def softplus(self):
        v = self.value
        sig = 0.5 * (1.0 + np.tanh(0.5 * v))
        return Var(np.logaddexp(0.0, v), ((self, lambda g: g * sig),))

    # -- reductions / shape ----------------------------------------------
    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def fn(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, shape).copy()

        return Var(self.value.sum(axis=axis, keepdims=keepdims), ((self, fn),))

    def reshape(self, *shape):
        orig = self.shape
        return Var(self.value.reshape(*shape), ((self, lambda g: g.reshape(orig)),))

    @property
    def T(self):
        return Var(self.value.T, ((self, lambda g: g.T),))


def logsumexp(x: Var, axis=-1):
    m = np.max(x.value, axis=axis, keepdims=True)
    shifted = x - Var(m)
    return shifted.exp().sum(axis=axis).log() + Var(np.squeeze(m, axis=axis))


def normalize(v: Var, axis=-1):
    return v / (v * v).sum(axis=axis, keepdims=True).sqrt()
