"""Accuracy matrix and the trajectory metrics derived from it."""

from __future__ import annotations

import numpy as np
from sklearn.metrics import accuracy_score, f1_score

from ..exceptions import ContractError


def evaluate(predict, test_sets):
    """Accuracy of ``predict`` on each ``(X, y)`` pair."""
    return [float(accuracy_score(y, predict(X))) for X, y in test_sets]


class RMatrix:
    """Lower-triangular accuracy matrix: ``R[i][j]`` is accuracy on task ``j`` after stage ``i`` (0-based)."""

    def __init__(self, rows=None):
        self.rows = []
        for row in rows or []:
            self.append(row)

    def append(self, row):
        row = [float(v) for v in row]
        if len(row) != len(self.rows) + 1:
            raise ContractError(f"row {len(self.rows) + 1} must hold {len(self.rows) + 1} entries, got {len(row)}")
        if any(not 0.0 <= v <= 1.0 for v in row):
            raise ContractError("accuracies must lie in [0, 1]")
        self.rows.append(row)

    @property
    def stages(self):
        return len(self.rows)

    def __getitem__(self, ij):
        i, j = ij
        return self.rows[i][j]

    def to_list(self):
        return [list(r) for r in self.rows]

    def to_array(self):
        """Square array with NaN above the diagonal."""
        out = np.full((self.stages, self.stages), np.nan)
        for i, row in enumerate(self.rows):
            out[i, : len(row)] = row
        return out


def build_r_matrix(per_stage_evals):
    """``per_stage_evals[i]`` lists accuracies on tasks ``0..i`` after stage ``i``."""
    return RMatrix(per_stage_evals)


def _rows(R):
    rows = R.rows if isinstance(R, RMatrix) else [list(r) for r in R]
    if not rows:
        raise ContractError("empty accuracy matrix")
    for i, row in enumerate(rows):
        if len(row) < i + 1:
            raise ContractError(f"row {i + 1} is incomplete")
    return rows


def avg_acc(R):
    """Mean over stages of the mean accuracy on all tasks seen so far."""
    rows = _rows(R)
    return sum(sum(row[: i + 1]) / (i + 1) for i, row in enumerate(rows)) / len(rows)


def avg_f(R):
    """Mean over all but the last task of (best accuracy ever) minus (final accuracy)."""
    rows = _rows(R)
    t = len(rows)
    if t < 2:
        raise ContractError("forgetting needs at least two stages")
    total = 0.0
    for j in range(t - 1):
        peak = max(rows[i][j] for i in range(j, t))
        total += peak - rows[t - 1][j]
    return total / (t - 1)


def macro_f1(y_true, y_pred):
    return float(f1_score(y_true, y_pred, average="macro", zero_division=0))
