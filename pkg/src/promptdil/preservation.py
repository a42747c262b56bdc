"""Per-class streaming feature statistics, teacher heads and distillation losses."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import ConfigurationError, ContractError, DimensionError

VARIANCE_FLOOR = 1e-8


class ClassStats:
    """Welford accumulators (count, mean, sum of squared deviations) per class."""

    def __init__(self, n_classes, dim):
        self.count = np.zeros(n_classes, dtype=np.int64)
        self.mean = np.zeros((n_classes, dim))
        self.sq_dev = np.zeros((n_classes, dim))

    @property
    def n_classes(self):
        return self.count.shape[0]

    @property
    def dim(self):
        return self.mean.shape[1]

    def update(self, f, c):
        """Fold one feature vector ``f`` of class ``c`` into the running statistics."""
        if not 0 <= c < self.n_classes:
            raise IndexError(f"class {c} outside [0, {self.n_classes})")
        f = np.asarray(f, dtype=np.float64)
        self.count[c] += 1
        delta = f - self.mean[c]
        self.mean[c] += delta / self.count[c]
        self.sq_dev[c] += delta * (f - self.mean[c])
        return self

    def update_many(self, features, labels):
        for f, c in zip(np.asarray(features), np.asarray(labels)):
            self.update(f, int(c))
        return self

    def variance(self):
        """Unbiased per-class variance; rows with fewer than two samples are NaN."""
        n = self.count[:, None].astype(np.float64)
        q = np.maximum(self.sq_dev, 0.0)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(n >= 2, q / np.maximum(n - 1.0, 1.0), np.nan)

    def eligible(self):
        return np.flatnonzero(self.count >= 2)

    def copy(self):
        out = ClassStats(self.n_classes, self.dim)
        out.count[:] = self.count
        out.mean[:] = self.mean
        out.sq_dev[:] = self.sq_dev
        return out

    def __repr__(self):
        return f"ClassStats(classes={self.n_classes}, dim={self.dim}, counts={self.count.tolist()})"


def welford_update(stats, f, c):
    return stats.update(f, c)


def merge_stats(a, b):
    """Pairwise (Chan et al.) combination of two accumulators."""
    if a.mean.shape != b.mean.shape:
        raise DimensionError(f"cannot merge stats of shapes {a.mean.shape} and {b.mean.shape}")
    out = ClassStats(a.n_classes, a.dim)
    na = a.count.astype(np.float64)[:, None]
    nb = b.count.astype(np.float64)[:, None]
    n = na + nb
    safe = np.where(n > 0, n, 1.0)
    delta = b.mean - a.mean
    out.count[:] = a.count + b.count
    out.mean[:] = np.where(nb == 0, a.mean, np.where(na == 0, b.mean, a.mean + delta * nb / safe))
    out.sq_dev[:] = np.where(
        nb == 0, a.sq_dev, np.where(na == 0, b.sq_dev, a.sq_dev + b.sq_dev + delta * delta * na * nb / safe)
    )
    return out


class ClassifierHead:
    """Linear head ``logits = f @ W.T + b``."""

    def __init__(self, weight, bias, frozen=False):
        self.frozen = bool(frozen)
        self.weight = Tensor(weight, requires_grad=not frozen, name="head.weight")
        self.bias = Tensor(bias, requires_grad=not frozen, name="head.bias")

    @classmethod
    def initialize(cls, n_classes, dim, rng):
        return cls(rng.normal(0.0, 1.0 / np.sqrt(dim), size=(n_classes, dim)), np.zeros(n_classes))

    def __call__(self, features):
        return ad.as_tensor(features) @ ad.transpose(self.weight) + self.bias

    def parameters(self):
        return [] if self.frozen else [self.weight, self.bias]

    def copy(self, frozen=None):
        return ClassifierHead(
            self.weight.data.copy(), self.bias.data.copy(), self.frozen if frozen is None else frozen
        )


def snapshot_teacher(student):
    """Frozen deep copy of ``student``."""
    return student.copy(frozen=True)


def _kd(features, teacher, student, temperature):
    if temperature <= 0:
        raise ConfigurationError(f"distillation temperature must be positive, got {temperature}")
    if not teacher.frozen:
        raise ContractError("the distillation teacher must be frozen")
    feats = ad.stop_gradient(features)
    target = teacher(feats).data
    return ad.mean(ad.kl_from_logits(target, student(feats), temperature)) * temperature**2


def real_kd_loss(f_real, teacher, student, temperature=2.0):
    """Batch-mean temperature-scaled KL from teacher to student on real features."""
    return _kd(f_real, teacher, student, temperature)


def pseudo_kd_loss(f_tilde, teacher, student, temperature=2.0):
    """Same objective on sampled pseudo features; only the student receives gradients."""
    return _kd(f_tilde, teacher, student, temperature)


def sample_pseudo(stats, count, rng, variance_floor=VARIANCE_FLOOR):
    """Draw ``count`` diagonal-Gaussian pseudo features with uniformly drawn classes."""
    classes = stats.eligible()
    if len(classes) == 0:
        raise ContractError("no class has the two samples needed for a variance estimate")
    picks = classes[rng.integers(0, len(classes), size=count)]
    sigma = np.sqrt(np.maximum(stats.variance()[picks], variance_floor))
    eps = rng.standard_normal((count, stats.dim))
    return stats.mean[picks] + eps * sigma, picks
