"""Prompt-usage drift detection and drift-proportional expansion sizing."""

from __future__ import annotations

import math
from collections import Counter, deque
from dataclasses import dataclass

import numpy as np

from .exceptions import ContractError

ENTROPY_EPS = 1e-10


def batch_mean_weights(weights):
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 2 or weights.shape[0] < 1:
        raise ContractError("expected a non-empty (batch, prompts) weight matrix")
    return weights.mean(axis=0)


def selection_entropy(w_bar, eps=ENTROPY_EPS):
    w_bar = np.asarray(w_bar, dtype=np.float64)
    return float(-(w_bar * np.log(w_bar + eps)).sum())


def usage_set(w_bar, tau_s=0.01):
    return frozenset(int(i) for i in np.flatnonzero(np.asarray(w_bar) > tau_s))


def usage_iou(current, reference):
    """Intersection over union; two empty sets count as identical."""
    union = len(current | reference)
    if union == 0:
        return 1.0
    return len(current & reference) / union


class DriftMonitor:
    """Sliding window of recent (entropy, usage set) observations for one layer."""

    def __init__(self, window=100, tau_s=0.01, alpha_d=1.0, beta_d=0.5, eta=0.1, eps=ENTROPY_EPS):
        self.window = int(window)
        self.tau_s = tau_s
        self.alpha_d = alpha_d
        self.beta_d = beta_d
        self.eta = eta
        self.eps = eps
        self.entries = deque()
        self._usage_counts = Counter()

    def __len__(self):
        return len(self.entries)

    def reference_set(self):
        """Union of the usage sets in the window, kept as occurrence counts."""
        return frozenset(self._usage_counts)

    def entropy_moments(self):
        """Window mean and population standard deviation of entropy."""
        h = np.fromiter((e[0] for e in self.entries), dtype=np.float64, count=len(self.entries))
        return float(h.mean()), float(h.std())

    def score(self, entropy, iou):
        """Drift score of an observation against the current window (0 below two entries)."""
        if len(self.entries) < 2:
            return 0.0
        h_mean, h_std = self.entropy_moments()
        return (
            self.alpha_d * abs(entropy - h_mean) / (h_std + self.eps)
            + self.beta_d * (1.0 / max(iou, self.eta) - 1.0)
        )

    def push(self, entropy, used):
        used = frozenset(int(i) for i in used)
        self.entries.append((float(entropy), used))
        self._usage_counts.update(used)
        while len(self.entries) > self.window:
            _, old = self.entries.popleft()
            self._usage_counts.subtract(old)
            for i in old:
                if self._usage_counts[i] <= 0:
                    del self._usage_counts[i]
        return self

    def observe(self, weights):
        """Score a (batch, N) routing-weight matrix, then add it to the window."""
        w_bar = batch_mean_weights(weights)
        h = selection_entropy(w_bar, self.eps)
        used = usage_set(w_bar, self.tau_s)
        d = self.score(h, usage_iou(used, self.reference_set()))
        self.push(h, used)
        return d

    def copy(self):
        out = DriftMonitor(self.window, self.tau_s, self.alpha_d, self.beta_d, self.eta, self.eps)
        for h, s in self.entries:
            out.push(h, s)
        return out

    def to_dict(self):
        return {
            "window": self.window, "tau_s": self.tau_s, "alpha_d": self.alpha_d,
            "beta_d": self.beta_d, "eta": self.eta, "eps": self.eps,
            "entries": [[h, sorted(s)] for h, s in self.entries],
        }

    @classmethod
    def from_dict(cls, d):
        out = cls(d["window"], d["tau_s"], d["alpha_d"], d["beta_d"], d["eta"], d["eps"])
        for h, s in d["entries"]:
            out.push(h, s)
        return out


def drift_score(entropy, monitor, iou):
    return monitor.score(entropy, iou)


def push_window(monitor, entropy, used):
    return monitor.push(entropy, used)


@dataclass(frozen=True)
class DriftReport:
    """Per-layer, per-batch drift scores (L x T) and their mean."""

    scores: np.ndarray

    @property
    def mean_drift(self):
        finite = self.scores[np.isfinite(self.scores)]
        return float(finite.mean()) if finite.size else 0.0

    def to_dict(self):
        return {"scores": self.scores.tolist(), "mean_drift": self.mean_drift}


def measure_drift(monitors, weight_batches):
    """Stream per-layer routing weights through the monitors.

    ``weight_batches`` yields, per batch, a sequence of ``(B, N)`` weight
    matrices, one per monitored layer. Monitors are updated in place.
    """
    columns = []
    for layer_weights in weight_batches:
        if len(layer_weights) != len(monitors):
            raise ContractError("one weight matrix per monitored layer is required")
        columns.append([m.observe(w) for m, w in zip(monitors, layer_weights)])
    if not columns:
        raise ContractError("drift measurement needs at least one batch")
    return DriftReport(np.asarray(columns, dtype=np.float64).T)


def expansion_size(active_count, mean_drift, d_max=5.0, e_min=10, e_max=80):
    if active_count < 1:
        raise ContractError("expansion sizing needs a non-empty active set")
    raw = math.floor(active_count * mean_drift / d_max)
    return int(min(max(raw, e_min), e_max))


def should_expand(mean_drift, theta=0.7):
    return mean_drift >= theta
