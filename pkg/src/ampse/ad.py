"""Minimal forward-mode dual numbers over numpy arrays.

``Dual(value, grad)`` carries ``value`` with shape ``S`` and ``grad`` with
shape ``S + (P,)``, the derivative of the value with respect to ``P`` seed
directions. The closed-form oracle formulas and the system reducers are written
against the helpers at the bottom of this module, so the same code runs on
plain arrays (fast, no derivatives) and on duals (exact Jacobians).
"""

from __future__ import annotations

import numpy as np


class Dual:
    __slots__ = ("value", "grad")
    __array_priority__ = 100

    def __init__(self, value, grad):
        self.value = np.asarray(value, dtype=float)
        self.grad = np.asarray(grad, dtype=float)

    @classmethod
    def seed(cls, value, index: int, n: int) -> "Dual":
        value = np.asarray(value, dtype=float)
        grad = np.zeros(value.shape + (n,))
        grad[..., index] = 1.0
        return cls(value, grad)

    @classmethod
    def constant(cls, value, n: int) -> "Dual":
        value = np.asarray(value, dtype=float)
        return cls(value, np.zeros(value.shape + (n,)))

    @property
    def n(self) -> int:
        return self.grad.shape[-1]

    def __repr__(self):
        return f"Dual({self.value!r}, grad_shape={self.grad.shape})"

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        if isinstance(other, Dual):
            return Dual(self.value + other.value, _bcast(self.grad, other.value) + _bcast(other.grad, self.value))
        other = np.asarray(other, dtype=float)
        return Dual(self.value + other, _bcast(self.grad, other))

    __radd__ = __add__

    def __neg__(self):
        return Dual(-self.value, -self.grad)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(
                self.value * other.value,
                self.grad * other.value[..., None] + other.grad * self.value[..., None],
            )
        other = np.asarray(other, dtype=float)
        return Dual(self.value * other, self.grad * other[..., None])

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            return self * other.reciprocal()
        other = np.asarray(other, dtype=float)
        return Dual(self.value / other, self.grad / other[..., None])

    def __rtruediv__(self, other):
        return self.reciprocal() * other

    def reciprocal(self) -> "Dual":
        inv = 1.0 / self.value
        return Dual(inv, -self.grad * (inv * inv)[..., None])

    def __pow__(self, p):
        if isinstance(p, Dual):
            raise TypeError("dual exponents are not supported")
        p = float(p)
        return Dual(self.value**p, self.grad * (p * self.value ** (p - 1.0))[..., None])

    def __getitem__(self, idx):
        return Dual(self.value[idx], self.grad[idx])


def _bcast(grad, other_value):
    shape = np.broadcast_shapes(grad.shape[:-1], np.shape(other_value))
    if shape == grad.shape[:-1]:
        return grad
    return np.broadcast_to(grad, shape + grad.shape[-1:])


def value_of(x):
    return x.value if isinstance(x, Dual) else np.asarray(x, dtype=float)


def sqrt(x):
    if isinstance(x, Dual):
        r = np.sqrt(x.value)
        return Dual(r, x.grad * (0.5 / r)[..., None])
    return np.sqrt(x)


def exp(x):
    if isinstance(x, Dual):
        e = np.exp(x.value)
        return Dual(e, x.grad * e[..., None])
    return np.exp(x)


def log10(x):
    if isinstance(x, Dual):
        return Dual(np.log10(x.value), x.grad * (1.0 / (x.value * np.log(10.0)))[..., None])
    return np.log10(x)


def maximum0(x):
    """max(0, x) with derivative 0 at and below zero."""
    if isinstance(x, Dual):
        on = (x.value > 0).astype(float)
        return Dual(x.value * on, x.grad * on[..., None])
    return np.maximum(x, 0.0)


def stack_grads(values: dict, n: int, shape) -> dict:
    """Promote every entry of ``values`` to a Dual of width ``n``."""
    out = {}
    for k, v in values.items():
        if isinstance(v, Dual):
            out[k] = v
        else:
            out[k] = Dual.constant(np.broadcast_to(np.asarray(v, dtype=float), shape), n)
    return out
