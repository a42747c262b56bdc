"""Homoscedastic uncertainty weighting of named loss terms."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import NumericalAbort

LOSS_NAMES = ("ce", "real", "pseudo", "div", "norm")
S_MIN, S_MAX = -3.0, 6.0


def effective_weight(s):
    return math.exp(-float(s))


class UncertaintyWeights:
    """One learnable log-variance ``s_i`` per loss term, clamped to ``[lo, hi]``."""

    def __init__(self, names=LOSS_NAMES, lo=S_MIN, hi=S_MAX, init=0.0):
        self.lo, self.hi = lo, hi
        self.log_vars = {n: Tensor(init, requires_grad=True, name=f"uw.{n}") for n in names}

    def parameters(self):
        return list(self.log_vars.values())

    def weights(self):
        return {n: effective_weight(s.data) for n, s in self.log_vars.items()}

    def values(self):
        return {n: float(s.data) for n, s in self.log_vars.items()}

    def clamp(self):
        for s in self.log_vars.values():
            s.data = np.clip(s.data, self.lo, self.hi)
        return self

    def total_loss(self, losses):
        return total_loss(losses, self)

    def copy(self):
        out = UncertaintyWeights(tuple(self.log_vars), self.lo, self.hi)
        for n, s in self.log_vars.items():
            out.log_vars[n].data = s.data.copy()
        return out


def check_finite(losses):
    for name, value in losses.items():
        v = float(ad._data(value))
        if not np.isfinite(v):
            raise NumericalAbort(name, v)


def total_loss(losses, uw):
    """``sum_i exp(-s_i) L_i + s_i`` over the provided (present) losses."""
    check_finite(losses)
    total = Tensor(0.0)
    for name, value in losses.items():
        s = uw.log_vars[name]
        total = total + ad.exp(-s) * value + s
    return total


def clamp_log_variances(uw):
    return uw.clamp()
