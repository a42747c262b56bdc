"""Rehearsal-free domain-incremental learning with sparse residual prompt routing."""

from .entmax import SparseWeights, entmax, entmax_vjp, solve_tau
from .harness.config import ExperimentConfig, load_config
from .harness.estimator import PromptDILClassifier

__all__ = [
    "ExperimentConfig",
    "PromptDILClassifier",
    "SparseWeights",
    "entmax",
    "entmax_vjp",
    "load_config",
    "solve_tau",
]

__version__ = "0.1.0"
