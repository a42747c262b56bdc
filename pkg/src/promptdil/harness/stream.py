"""Synthetic domain-incremental streams.

Every stage shares the same class prototypes (fixed token patterns); only a
per-stage domain transform changes: a rotation of the input channel basis,
a partial channel permutation and extra additive noise, all scaled by the
stage severity in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from ..exceptions import ConfigurationError
from .rng import rng_for


@dataclass
class Split:
    X: np.ndarray
    y: np.ndarray


@dataclass
class DomainTransform:
    severity: float
    rotation: np.ndarray
    permutation: np.ndarray
    noise: float

    def apply(self, x, rng):
        x = x @ self.rotation
        x = x[..., self.permutation]
        if self.noise > 0:
            x = x + rng.normal(0.0, self.noise, size=x.shape)
        return x


@dataclass
class Stage:
    train: Split
    val: Split
    test: Split
    transform: DomainTransform


@dataclass
class SyntheticStream:
    stages: list
    prototypes: np.ndarray

    def __len__(self):
        return len(self.stages)

    def __getitem__(self, i):
        return self.stages[i]


def domain_transform(severity, input_dim, rng, max_angle=np.pi / 2, noise_scale=0.5):
    if not 0.0 <= severity <= 1.0:
        raise ConfigurationError(f"severity must lie in [0, 1], got {severity}")
    a = rng.standard_normal((input_dim, input_dim))
    skew = a - a.T
    skew /= np.linalg.norm(skew, 2)
    rotation = expm(severity * max_angle * skew) if severity > 0 else np.eye(input_dim)
    n_perm = int(round(severity * input_dim))
    perm = np.arange(input_dim)
    if n_perm >= 2:
        chosen = rng.choice(input_dim, size=n_perm, replace=False)
        perm[chosen] = chosen[np.roll(np.arange(n_perm), 1)]
    return DomainTransform(float(severity), rotation, perm, severity * noise_scale)


def _sample(prototypes, count, noise, rng):
    n_classes = prototypes.shape[0]
    y = np.arange(count) % n_classes
    rng.shuffle(y)
    x = prototypes[y] + rng.normal(0.0, noise, size=(count,) + prototypes.shape[1:])
    return x, y


def generate_stream(config, seed=None):
    """Build a :class:`SyntheticStream` from an experiment config."""
    seed = config.seed if seed is None else seed
    if config.stages < 2 or config.classes < 2:
        raise ConfigurationError("a stream needs at least two stages and two classes")
    severities = config.stage_severities()
    proto_rng = rng_for(seed, "stream.prototypes")
    prototypes = proto_rng.normal(0.0, config.class_separation, size=(config.classes, config.tokens, config.input_dim))
    stages = []
    for k, sev in enumerate(severities):
        t_rng = rng_for(seed, f"stream.transform.{k}")
        transform = domain_transform(sev, config.input_dim, t_rng, noise_scale=config.shift_noise)
        splits = []
        for name, count in (("train", config.train_size), ("val", config.val_size), ("test", config.test_size)):
            s_rng = rng_for(seed, f"stream.{name}.{k}")
            x, y = _sample(prototypes, count, config.sample_noise, s_rng)
            splits.append(Split(transform.apply(x, s_rng), y))
        stages.append(Stage(*splits, transform))
    return SyntheticStream(stages, prototypes)
