"""Input validation helpers for the estimator API."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import DimensionError


def check_tokens(X, n_tokens=None, input_dim=None):
    """Coerce ``X`` to a finite float64 ``(n_samples, n_tokens, input_dim)`` array.

    2-D input is split into ``n_tokens`` equal chunks per row (one token per row
    when ``n_tokens`` is ``None``).
    """
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_all_finite=True)
    if X.ndim == 2:
        tokens = 1 if n_tokens is None else int(n_tokens)
        if X.shape[1] % tokens:
            raise DimensionError(f"{X.shape[1]} features do not split into {tokens} tokens")
        X = X.reshape(X.shape[0], tokens, -1)
    elif X.ndim != 3:
        raise DimensionError(f"expected 2-D or 3-D input, got {X.ndim}-D")
    if input_dim is not None and X.shape[2] != input_dim:
        raise DimensionError(f"expected token width {input_dim}, got {X.shape[2]}")
    return X


def check_labels(y, classes):
    """Map labels onto ``0..C-1`` positions in ``classes``."""
    y = np.asarray(y)
    if y.ndim != 1:
        raise DimensionError("labels must be one-dimensional")
    idx = np.searchsorted(classes, y)
    idx = np.clip(idx, 0, len(classes) - 1)
    if not np.all(classes[idx] == y):
        unknown = sorted(set(np.unique(y).tolist()) - set(classes.tolist()))
        raise ValueError(f"labels {unknown} are not among the declared classes")
    return idx.astype(np.intp)
