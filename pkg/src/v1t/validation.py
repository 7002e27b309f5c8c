"""Input validation helpers used by the data layer and the estimator."""

from __future__ import annotations

import numpy as np

from .exceptions import DataError, DimensionError


def check_array(name: str, arr, shape=None, ndim=None, finite=True, non_negative=False) -> np.ndarray:
    """Validate and return `arr` as a float array.

    shape  -- expected shape; entries of None are unconstrained.
    ndim   -- expected rank (ignored when shape is given).
    """
    arr = np.asarray(arr)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    if shape is not None:
        if arr.ndim != len(shape) or any(
            want is not None and got != want for got, want in zip(arr.shape, shape)
        ):
            raise DimensionError(f"{name}: expected shape {shape}, got {arr.shape}")
    elif ndim is not None and arr.ndim != ndim:
        raise DimensionError(f"{name}: expected {ndim}-d array, got {arr.ndim}-d")
    if finite and not np.isfinite(arr).all():
        raise DataError(f"{name}: contains non-finite values")
    if non_negative and arr.size and arr.min() < 0:
        raise DataError(f"{name}: contains negative values")
    return arr


def check_positive(name: str, value):
    if value <= 0:
        raise DataError(f"{name} must be positive, got {value}")
    return value
