"""Experiment configuration: defaults, file loading and hashing."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

from ..exceptions import ConfigurationError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

COMPONENTS = ("pseudo", "distill", "div", "norm", "uw", "pudd", "query-enhancer")


@dataclass
class ExperimentConfig:
    # stream
    stages: int = 3
    classes: int = 3
    tokens: int = 16
    input_dim: int = 16
    train_size: int = 2000
    val_size: int = 300
    test_size: int = 600
    severity: list = field(default_factory=lambda: [0.0, 0.8, 0.8])
    class_separation: float = 1.0
    sample_noise: float = 1.0
    shift_noise: float = 0.5
    # model (desk scale; the reference scale is D=768, d_a=512)
    feature_dim: int = 64
    bottleneck: int = 32
    pool_size: int = 60
    memory_slots: int = 9
    layers: int = 4
    heads: int = 4
    memory_heads: int = 4
    inject_layers: list | None = None
    # routing / drift
    alpha: float = 1.5
    lambda_r: float = 0.1
    tau_s: float = 0.01
    window: int = 100
    drift_alpha: float = 1.0
    drift_beta: float = 0.5
    eta: float = 0.1
    d_max: float = 5.0
    e_min: int = 10
    e_max: int = 80
    theta: float = 0.7
    # preservation / weighting
    temperature: float = 2.0
    pseudo_count: int | None = None
    memory_momentum: float = 0.99
    reset_uw: bool = False
    # optimization
    batch_size: int = 64
    epochs: int = 10
    patience: int = 5
    lr: float = 1e-3
    weight_decay: float = 0.01
    seed: int = 0
    drop: list = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.stages < 1 or self.classes < 2:
            raise ConfigurationError("need at least one stage and two classes")
        if len(self.severity) not in (1, self.stages) and len(self.severity) < self.stages:
            raise ConfigurationError(f"severity list has {len(self.severity)} entries for {self.stages} stages")
        for s in self.severity:
            if not 0.0 <= float(s) <= 1.0:
                raise ConfigurationError(f"severity {s} outside [0, 1]")
        unknown = set(self.drop) - set(COMPONENTS)
        if unknown:
            raise ConfigurationError(f"unknown ablation component(s): {sorted(unknown)}")
        if not 1.0 < self.alpha <= 2.0:
            raise ConfigurationError("alpha must lie in (1, 2]")
        if self.temperature <= 0:
            raise ConfigurationError("temperature must be positive")
        if self.feature_dim % self.heads or self.feature_dim % self.memory_heads:
            raise ConfigurationError("feature_dim must be divisible by the head counts")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigurationError("batch_size and epochs must be positive")

    def stage_severities(self):
        if len(self.severity) == 1:
            return [0.0] + [float(self.severity[0])] * (self.stages - 1)
        return [float(s) for s in self.severity[: self.stages]]

    def estimator_params(self):
        """Keyword arguments for :class:`~promptdil.harness.estimator.PromptDILClassifier`."""
        return {
            "feature_dim": self.feature_dim, "bottleneck": self.bottleneck, "pool_size": self.pool_size,
            "memory_slots": self.memory_slots, "n_layers": self.layers, "n_heads": self.heads,
            "memory_heads": self.memory_heads, "inject_layers": self.inject_layers,
            "alpha": self.alpha, "lambda_r": self.lambda_r, "tau_s": self.tau_s, "window": self.window,
            "drift_alpha": self.drift_alpha, "drift_beta": self.drift_beta, "eta": self.eta,
            "d_max": self.d_max, "e_min": self.e_min, "e_max": self.e_max, "theta": self.theta,
            "temperature": self.temperature, "pseudo_count": self.pseudo_count,
            "memory_momentum": self.memory_momentum, "reset_uw": self.reset_uw,
            "batch_size": self.batch_size, "epochs": self.epochs, "patience": self.patience,
            "lr": self.lr, "weight_decay": self.weight_decay, "drop": tuple(self.drop),
            "random_state": self.seed,
        }

    def to_dict(self):
        return dataclasses.asdict(self)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


def config_from_dict(data):
    names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(data) - names
    if unknown:
        raise ConfigurationError(f"unknown config key(s): {sorted(unknown)}")
    try:
        return ExperimentConfig(**data)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc


def load_config(path):
    path = Path(path)
    try:
        text = path.read_bytes()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    try:
        if path.suffix.lower() == ".json":
            data = json.loads(text)
        else:
            data = tomllib.loads(text.decode("utf-8"))
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigurationError(f"cannot parse config {path}: {exc}") from exc
    return config_from_dict(data)
