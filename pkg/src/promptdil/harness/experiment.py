"""Multi-stage experiment driver: stream, training, evaluation, diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentConfig
from .crosscomp import CrossComposition, cross_composition
from .estimator import PromptDILClassifier
from .metrics import RMatrix, avg_acc, avg_f, evaluate
from .stream import generate_stream


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    estimator: PromptDILClassifier
    rmatrix: RMatrix
    xcomp: CrossComposition | None = None
    usage: list = field(default_factory=list)

    @property
    def avg_acc(self):
        return avg_acc(self.rmatrix)

    @property
    def avg_f(self):
        return avg_f(self.rmatrix) if self.rmatrix.stages >= 2 else 0.0

    def summary(self):
        est = self.estimator
        stages = range(2, est.n_stages_ + 1)
        pool_sizes = []
        for snap in est.stage_snapshots_:
            pool_sizes.append(int(snap["network"]["pool"].size))
        out = {
            "config": self.config.to_dict(),
            "config_hash": self.config.hash(),
            "seed": self.config.seed,
            "stages": est.n_stages_,
            "avg_acc": self.avg_acc,
            "avg_f": self.avg_f,
            "rmatrix": self.rmatrix.to_list(),
            "mean_drift": {str(k): est.drift_reports_[k].mean_drift for k in stages if k in est.drift_reports_},
            "expansion": {str(k): int(est.expansions_.get(k, 0)) for k in stages},
            "pool_size": pool_sizes,
            "uw_log_variance": None if est.uw_ is None else est.uw_.values(),
            "uw_weight": None if est.uw_ is None else est.uw_.weights(),
            "events": [list(e) for e in est.events_],
        }
        if self.xcomp is not None:
            out["xcomp"] = self.xcomp.asymmetry()
        return out


def run_experiment(config, seed=None, with_xcomp=True, with_usage=True, stream=None):
    """Train over every stage of the synthetic stream and evaluate after each stage."""
    if seed is not None:
        config = config.replace(seed=int(seed))
    stream = generate_stream(config) if stream is None else stream
    est = PromptDILClassifier(**config.estimator_params())
    classes = np.arange(config.classes)
    rmatrix = RMatrix()
    for k, stage in enumerate(stream.stages):
        est.partial_fit(stage.train.X, stage.train.y, classes=classes if k == 0 else None,
                        X_val=stage.val.X, y_val=stage.val.y)
        tests = [(s.test.X, s.test.y) for s in stream.stages[: k + 1]]
        rmatrix.append(evaluate(est.predict, tests))
    tests = [(s.test.X, s.test.y) for s in stream.stages]
    xcomp = cross_composition(est, tests) if with_xcomp else None
    usage = []
    if with_usage:
        for X, _ in tests:
            usage.append([w.mean(axis=0).tolist() for w in est.routing_weights(X)])
    return ExperimentResult(config, est, rmatrix, xcomp, usage)
