"""Input validation helpers for the estimator API.

These check array-shaped inputs (the estimator surface); file-level
validation lives with the parsers in ``data``.
"""
from __future__ import annotations

import numpy as np

from .errors import DimensionError, LabelValidationError
from .layers import NUM_AUS, NUM_EXPRESSIONS
from .objectives import AU_SENTINEL, EXPR_SENTINEL, VA_SENTINEL

# Multi-task label block column layout for (n, 15) arrays:
# [valence, arousal, expression, au1..au26]
LABEL_BLOCK_WIDTH = 3 + NUM_AUS


def check_feature_matrix(X, name: str = "X") -> np.ndarray:
    """Coerce to a finite 2-D float64 matrix with at least one row/column."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {X.shape}")
    if X.shape[0] == 0 or X.shape[1] == 0:
        raise DimensionError(f"{name} must be non-empty, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise LabelValidationError(f"{name} contains non-finite values")
    return X


def check_va_labels(y, n_rows: int) -> np.ndarray:
    """(n, 2) valence/arousal block; entries in [-1, 1] or the -5 sentinel."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (n_rows, 2):
        raise DimensionError(f"VA labels must have shape ({n_rows}, 2), got {y.shape}")
    ok = ((y >= -1.0) & (y <= 1.0)) | (y == VA_SENTINEL)
    if not ok.all():
        raise LabelValidationError("VA labels outside [-1, 1] and not the -5 sentinel")
    return y


def check_expr_labels(y, n_rows: int) -> np.ndarray:
    """(n,) expression classes 0..7 or the -1 sentinel."""
    y = np.asarray(y)
    if y.shape != (n_rows,):
        raise DimensionError(f"expression labels must have shape ({n_rows},), got {y.shape}")
    y = y.astype(np.int64)
    ok = ((y >= 0) & (y < NUM_EXPRESSIONS)) | (y == EXPR_SENTINEL)
    if not ok.all():
        raise LabelValidationError("expression labels outside 0..7 and not the -1 sentinel")
    return y


def check_au_labels(y, n_rows: int) -> np.ndarray:
    """(n, 12) AU block; rows all 0/1 or all -1."""
    y = np.asarray(y)
    if y.shape != (n_rows, NUM_AUS):
        raise DimensionError(f"AU labels must have shape ({n_rows}, {NUM_AUS}), got {y.shape}")
    y = y.astype(np.int64)
    sentinel_rows = (y == AU_SENTINEL).any(axis=1)
    if not (y[sentinel_rows] == AU_SENTINEL).all():
        raise LabelValidationError("AU rows must not mix values with the -1 sentinel")
    vals = y[~sentinel_rows]
    if vals.size and not np.isin(vals, (0, 1)).all():
        raise LabelValidationError("AU labels must be 0/1 or the -1 sentinel")
    return y


def check_label_block(y, n_rows: int) -> np.ndarray:
    """(n, 15) multi-task block: [valence, arousal, expression, 12 AUs]."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (n_rows, LABEL_BLOCK_WIDTH):
        raise DimensionError(
            f"label block must have shape ({n_rows}, {LABEL_BLOCK_WIDTH}), got {y.shape}")
    check_va_labels(y[:, :2], n_rows)
    check_expr_labels(y[:, 2], n_rows)
    check_au_labels(y[:, 3:], n_rows)
    return y
