"""Forward-mode automatic differentiation to second order.

A Dual2 carries a value, a gradient and a Hessian through arithmetic.
Components may themselves be Dual2 instances, so nesting two levels yields
derivatives of expressions that already contain derivatives (needed when a
derived scalar field must be differentiated again).
"""
from __future__ import annotations

import numpy as np


def _outer(a, b):
    # np.outer ravels and copies; broadcasting is measurably faster on the
    # tiny gradient vectors seen here and works for object dtype too
    return np.asarray(a)[:, None] * np.asarray(b)


class Dual2:
    """Second-order dual number: value, gradient (n,), Hessian (n, n)."""

    __slots__ = ("val", "grad", "hess")
    __array_priority__ = 1000  # make ndarray ops defer to our reflected ops

    def __init__(self, val, grad, hess):
        self.val = val
        self.grad = grad
        self.hess = hess

    # -- helpers ---------------------------------------------------------

    def _map_array(self, other, op):
        out = np.empty(other.shape, dtype=object)
        flat_in = other.ravel()
        flat_out = out.ravel()
        for i in range(flat_in.size):
            flat_out[i] = op(flat_in[i])
        return out

    # -- arithmetic ------------------------------------------------------

    def __add__(self, o):
        if isinstance(o, Dual2):
            return Dual2(self.val + o.val, self.grad + o.grad,
                         self.hess + o.hess)
        if isinstance(o, np.ndarray):
            return self._map_array(o, lambda el: self + el)
        return Dual2(self.val + o, self.grad, self.hess)

    __radd__ = __add__

    def __sub__(self, o):
        if isinstance(o, Dual2):
            return Dual2(self.val - o.val, self.grad - o.grad,
                         self.hess - o.hess)
        if isinstance(o, np.ndarray):
            return self._map_array(o, lambda el: self - el)
        return Dual2(self.val - o, self.grad, self.hess)

    def __rsub__(self, o):
        if isinstance(o, np.ndarray):
            return self._map_array(o, lambda el: el - self)
        return Dual2(o - self.val, -self.grad, -self.hess)

    def __mul__(self, o):
        if isinstance(o, Dual2):
            hess = (self.val * o.hess + o.val * self.hess
                    + _outer(self.grad, o.grad) + _outer(o.grad, self.grad))
            return Dual2(self.val * o.val,
                         self.val * o.grad + o.val * self.grad, hess)
        if isinstance(o, np.ndarray):
            return self._map_array(o, lambda el: self * el)
        return Dual2(self.val * o, self.grad * o, self.hess * o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        if isinstance(o, Dual2):
            return self * o ** -1
        if isinstance(o, np.ndarray):
            return self._map_array(o, lambda el: self / el)
        return self * (1.0 / o)

    def __rtruediv__(self, o):
        inv = self ** -1
        if isinstance(o, np.ndarray):
            return inv._map_array(o, lambda el: el * inv)
        return inv * o

    def __pow__(self, k):
        if not isinstance(k, (int, float)):
            raise TypeError("exponent must be a plain number")
        if k == 0:
            return Dual2(1.0, 0.0 * self.grad, 0.0 * self.hess)
        if k == 1:
            return self
        v = self.val
        df = k * v ** (k - 1)
        d2f = k * (k - 1) * v ** (k - 2)
        hess = df * self.hess + d2f * _outer(self.grad, self.grad)
        return Dual2(v ** k, df * self.grad, hess)

    def __neg__(self):
        return Dual2(-self.val, -self.grad, -self.hess)

    def __pos__(self):
        return self

    def __repr__(self):
        return f"Dual2({self.val!r})"


def seed_variables(x) -> np.ndarray:
    """Seed one Dual2 variable per state entry; entries may be Dual2."""
    n = len(x)
    out = np.empty(n, dtype=object)
    for i in range(n):
        grad = np.zeros(n)
        grad[i] = 1.0
        out[i] = Dual2(x[i], grad, np.zeros((n, n)))
    return out


def value_grad_hess(fn, x):
    """Value, gradient and Hessian of fn at x via dual propagation.

    fn must accept an indexable state of length n whose entries support
    arithmetic. Entries of x may themselves be Dual2 (nested derivation).
    """
    xs = seed_variables(x)
    y = fn(xs)
    n = len(x)
    if not isinstance(y, Dual2):  # constant field
        return y, np.zeros(n), np.zeros((n, n))
    return y.val, y.grad, y.hess
