"""Cross-composition diagnostic: stage-i prompt state paired with stage-j head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..exceptions import StateError
from ..validation import check_tokens
from .metrics import macro_f1
from .model import batches


@dataclass
class CrossComposition:
    """``accuracy[i, j, k]``: prompt state of stage ``i`` with head ``j`` on test set ``k``."""

    accuracy: np.ndarray
    macro_f1: np.ndarray

    @property
    def mean_accuracy(self):
        return self.accuracy.mean(axis=2)

    @property
    def mean_f1(self):
        return self.macro_f1.mean(axis=2)

    def asymmetry(self):
        """Drops from the final composition when only the head or only the prompt state is older."""
        a = self.mean_accuracy
        t = a.shape[0] - 1
        if t == 0:
            return {"head_swap_drop": 0.0, "backbone_swap_drop": 0.0, "asymmetry": 0.0}
        head = float(np.mean([a[t, t] - a[t, j] for j in range(t)]))
        backbone = float(np.mean([a[t, t] - a[i, t] for i in range(t)]))
        return {"head_swap_drop": head, "backbone_swap_drop": backbone, "asymmetry": head - backbone}

    def to_dict(self):
        return {
            "accuracy": self.accuracy.tolist(),
            "macro_f1": self.macro_f1.tolist(),
            "mean_accuracy": self.mean_accuracy.tolist(),
            "mean_macro_f1": self.mean_f1.tolist(),
            **self.asymmetry(),
        }


def cross_composition(estimator, test_sets, snapshots=None):
    """Evaluate every (prompt state, head) pair of ``snapshots`` on every test set.

    ``snapshots`` defaults to ``estimator.stage_snapshots_``; each entry holds
    ``"network"`` (a :meth:`PromptedNetwork.snapshot`) and ``"head"``.
    """
    snapshots = estimator.stage_snapshots_ if snapshots is None else snapshots
    if not snapshots:
        raise StateError("cross composition needs at least one stored stage snapshot")
    for i, snap in enumerate(snapshots):
        if snap is None or "network" not in snap or "head" not in snap:
            raise StateError(f"snapshot for stage {i + 1} is missing")
    base = estimator.network_
    t, k = len(snapshots), len(test_sets)
    acc = np.zeros((t, t, k))
    f1 = np.zeros((t, t, k))
    test_sets = [(check_tokens(X, estimator.n_tokens, estimator.input_dim_), np.asarray(y)) for X, y in test_sets]
    hidden = [base.backbone.patch_hidden(X) for X, _ in test_sets]
    for i, snap in enumerate(snapshots):
        net = base.with_snapshot(snap["network"])
        feats = [
            np.vstack([net.forward_cached(base.backbone.patch_kv([h[idx] for h in hid])).features.data
                       for idx in batches(len(y), 256)])
            for hid, (_, y) in zip(hidden, test_sets)
        ]
        for j, other in enumerate(snapshots):
            head = other["head"]
            for m, (f, (_, y)) in enumerate(zip(feats, test_sets)):
                y = np.asarray(y)
                pred = np.argmax(f @ head.weight.data.T + head.bias.data, axis=1)
                pred = estimator.classes_[pred]
                acc[i, j, m] = float(np.mean(pred == y))
                f1[i, j, m] = macro_f1(y, pred)
    return CrossComposition(acc, f1)
