"""Forward-mode dual arrays: (primal, tangent) pairs propagated through an MLP."""

from __future__ import annotations

import numpy as np


class Dual:
    __slots__ = ("p", "t")

    def __init__(self, primal, tangent=None):
        self.p = np.asarray(primal, dtype=float)
        self.t = np.zeros_like(self.p) if tangent is None else np.asarray(tangent, dtype=float)

    @staticmethod
    def _lift(x):
        return x if isinstance(x, Dual) else Dual(x)

    def __add__(self, other):
        o = Dual._lift(other)
        return Dual(self.p + o.p, self.t + o.t)

    __radd__ = __add__

    def __sub__(self, other):
        o = Dual._lift(other)
        return Dual(self.p - o.p, self.t - o.t)

    def __mul__(self, other):
        o = Dual._lift(other)
        return Dual(self.p * o.p, self.t * o.p + self.p * o.t)

    __rmul__ = __mul__

    def __matmul__(self, w):
        # weights are constants
        return Dual(self.p @ w, self.t @ w)

    def tanh(self):
        y = np.tanh(self.p)
        return Dual(y, (1.0 - y * y) * self.t)

    def __repr__(self):
        return f"Dual(p={self.p!r}, t={self.t!r})"
