"""Alpha-entmax in the inner-scaled parameterization.

For logits ``l`` the weights are::

    w_j = [ (alpha - 1) / alpha * (l_j - tau) ]_+ ** (1 / (alpha - 1))

with ``tau`` chosen so the weights sum to one. This is the standard
``(alpha - 1) * z`` entmax evaluated at ``z = l / alpha``; at ``alpha = 2`` it
is the Euclidean simplex projection of ``l / 2``.

All solvers are vectorized over leading axes; the last axis is the prompt axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .exceptions import ConfigurationError, DimensionError

BISECT_ITERS = 100
REFINE_EVERY = 12


@dataclass(frozen=True)
class SparseWeights:
    """Entmax output: weights, their positive support and the threshold."""

    weights: np.ndarray
    tau: np.ndarray

    @property
    def support(self):
        return self.weights > 0

    def support_indices(self):
        if self.weights.ndim != 1:
            raise DimensionError("support_indices is defined for a single vector")
        return np.flatnonzero(self.weights > 0)


def _check(logits, alpha):
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim == 0 or logits.shape[-1] == 0:
        raise DimensionError("entmax needs at least one logit")
    if not 1.0 < alpha <= 2.0:
        raise ConfigurationError(f"alpha must lie in (1, 2], got {alpha}; use softmax for alpha=1")
    return logits


def _weights_at(scaled, t, p):
    return np.maximum(scaled - t, 0.0) ** p


def _bisect(scaled, p, alpha=None):
    """Threshold on the scaled logits by bisection over [max-1, max].

    With ``alpha`` given, every ``REFINE_EVERY`` halvings the bracket's lower
    end is refined on its support; once every row's refined threshold implies
    that same support it is the exact solution and the loop stops early.
    """
    hi = scaled.max(axis=-1, keepdims=True)
    lo = hi - 1.0
    for it in range(1, BISECT_ITERS + 1):
        mid = 0.5 * (lo + hi)
        over = _weights_at(scaled, mid, p).sum(axis=-1, keepdims=True) >= 1.0
        lo = np.where(over, mid, lo)
        hi = np.where(over, hi, mid)
        if np.all(hi - lo <= 4 * np.finfo(float).eps * np.maximum(1.0, np.abs(hi))):
            break
        if alpha is not None and it % REFINE_EVERY == 0:
            t = _refine_on_support(scaled, lo, alpha)
            if np.array_equal(scaled > t, scaled > lo):
                return t
    return lo if alpha is None else _refine_on_support(scaled, lo, alpha)


def _refine_on_support(scaled, t, alpha):
    """Solve the threshold exactly with the support implied by ``t`` held fixed."""
    p = 1.0 / (alpha - 1.0)
    mask = scaled > t
    k = mask.sum(axis=-1, keepdims=True)
    if alpha == 2.0:
        return (np.where(mask, scaled, 0.0).sum(axis=-1, keepdims=True) - 1.0) / k
    if alpha == 1.5:
        return _quadratic_root(scaled, mask, k)
    for _ in range(8):
        gap = np.where(mask, np.maximum(scaled - t, 0.0), 0.0)
        f = (gap**p).sum(axis=-1, keepdims=True) - 1.0
        df = -p * (gap ** (p - 1.0)).sum(axis=-1, keepdims=True)
        step = np.where(df != 0, f / df, 0.0)
        t = t - step
    return t


def _quadratic_root(scaled, mask, k):
    # sum_S (u - t)^2 = 1, smaller root
    u = np.where(mask, scaled, 0.0)
    s1 = u.sum(axis=-1, keepdims=True)
    s2 = (u * u).sum(axis=-1, keepdims=True)
    disc = np.maximum(s1 * s1 - k * (s2 - 1.0), 0.0)
    return (s1 - np.sqrt(disc)) / k


def _sorted_threshold_15(scaled):
    """Exact threshold for alpha=1.5 by scanning sorted support sizes."""
    srt = -np.sort(-scaled, axis=-1)
    n = scaled.shape[-1]
    ks = np.arange(1, n + 1, dtype=np.float64)
    s1 = np.cumsum(srt, axis=-1)
    s2 = np.cumsum(srt * srt, axis=-1)
    mean = s1 / ks
    disc = np.maximum(1.0 / ks - (s2 / ks - mean * mean), 0.0)
    tk = mean - np.sqrt(disc)
    valid = tk < srt
    last = n - 1 - np.argmax(valid[..., ::-1], axis=-1)
    return np.take_along_axis(tk, last[..., None], axis=-1)


def solve_tau(logits, alpha=1.5, method="bisect"):
    """Threshold ``tau`` (in logit units) making the entmax weights sum to one.

    ``method="sort"`` uses the exact sorted solver and is only available for
    ``alpha == 1.5``; the bisection path works for every alpha in (1, 2].
    """
    logits = _check(logits, alpha)
    scale = (alpha - 1.0) / alpha
    scaled = logits * scale
    if method == "sort":
        if alpha != 1.5:
            raise ConfigurationError("the sorted solver is implemented for alpha=1.5 only")
        t = _sorted_threshold_15(scaled)
    elif method == "bisect":
        t = _bisect(scaled, 1.0 / (alpha - 1.0), alpha)
    else:
        raise ConfigurationError(f"unknown tau solver {method!r}")
    return t[..., 0] / scale


def entmax(logits, alpha=1.5, method="bisect"):
    """Row-wise alpha-entmax over the last axis; returns :class:`SparseWeights`."""
    logits = _check(logits, alpha)
    tau = solve_tau(logits, alpha, method=method)
    scale = (alpha - 1.0) / alpha
    w = _weights_at(logits * scale, (tau * scale)[..., None], 1.0 / (alpha - 1.0))
    w = w / w.sum(axis=-1, keepdims=True)
    return SparseWeights(weights=w, tau=tau)


def entmax_vjp(out, upstream, alpha=1.5):
    """Vector-Jacobian product of :func:`entmax` at output ``out``.

    On the support the Jacobian is ``(diag(s) - s s^T / sum(s)) / alpha`` with
    ``s = w ** (2 - alpha)``; it is zero elsewhere.
    """
    w = out.weights if isinstance(out, SparseWeights) else np.asarray(out, dtype=np.float64)
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != w.shape:
        raise DimensionError(f"upstream shape {g.shape} does not match weights {w.shape}")
    s = np.where(w > 0, w ** (2.0 - alpha), 0.0)
    sg = (s * g).sum(axis=-1, keepdims=True) / s.sum(axis=-1, keepdims=True)
    return (s * (g - sg)) / alpha


def entmax_tensor(logits, alpha=1.5):
    """Differentiable entmax on an autodiff :class:`~promptdil.autodiff.Tensor`."""
    logits = ad.as_tensor(logits)
    out = entmax(logits.data, alpha)
    return ad._make(out.weights, (logits,), lambda g: (entmax_vjp(out, g, alpha),))
