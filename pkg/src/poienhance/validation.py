"""Input validation helpers shared by the estimator and pipeline entry points."""

from __future__ import annotations

import numpy as np

from .errors import UserError


def check_matrix(x, name: str, n_rows: int | None = None, n_cols: int | None = None):
    """Coerce to a finite float32 2-D array, with optional shape pinning."""
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim != 2:
        raise UserError(f"{name} must be 2-D, got shape {arr.shape}")
    if n_rows is not None and arr.shape[0] != n_rows:
        raise UserError(f"{name} has {arr.shape[0]} rows, expected {n_rows}")
    if n_cols is not None and arr.shape[1] != n_cols:
        raise UserError(f"{name} has {arr.shape[1]} columns, expected {n_cols}")
    if not np.isfinite(arr).all():
        raise UserError(f"{name} contains non-finite values")
    return arr


def check_feature_block(block, n_rows: int | None = None):
    """Validate the (visit, address, surrounding, base) matrix mapping.

    Accepts any mapping with those four keys; the three feature matrices must
    share one shape and the base matrix must have the same row count.
    """
    required = ("visit", "address", "surrounding", "base")
    missing = [k for k in required if k not in block]
    if missing:
        raise UserError(f"input block missing keys: {missing}")
    visit = check_matrix(block["visit"], "visit", n_rows=n_rows)
    address = check_matrix(
        block["address"], "address", n_rows=visit.shape[0], n_cols=visit.shape[1]
    )
    surrounding = check_matrix(
        block["surrounding"], "surrounding", n_rows=visit.shape[0], n_cols=visit.shape[1]
    )
    base = check_matrix(block["base"], "base", n_rows=visit.shape[0])
    return visit, address, surrounding, base


def check_batch_rows(batch_rows, n_rows: int, min_size: int = 3):
    """Validate row-index batches: integer arrays, in range, no duplicates."""
    if not batch_rows:
        raise UserError("no training batches given")
    out = []
    for i, rows in enumerate(batch_rows):
        arr = np.asarray(rows)
        if arr.ndim != 1 or not np.issubdtype(arr.dtype, np.integer):
            raise UserError(f"batch {i} must be a 1-D integer array")
        if len(arr) < min_size:
            raise UserError(f"batch {i} has {len(arr)} rows, need >= {min_size}")
        if arr.min() < 0 or arr.max() >= n_rows:
            raise UserError(f"batch {i} indexes outside [0, {n_rows})")
        if len(np.unique(arr)) != len(arr):
            raise UserError(f"batch {i} repeats a row")
        out.append(arr.astype(np.int64))
    return out
