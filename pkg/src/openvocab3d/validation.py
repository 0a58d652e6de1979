"""Small input-validation helpers shared by all modules."""

from __future__ import annotations

import numpy as np

from .errors import InputFormatError


def as_points_array(points, name: str = "points") -> np.ndarray:
    """Coerce to a finite (N, 3) float64 array."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 0:
        return arr.reshape(0, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise InputFormatError(f"{name} must have shape (N, 3), got {arr.shape}")
    if arr.size and not np.isfinite(arr).all():
        raise InputFormatError(f"{name} contains non-finite coordinates")
    return arr


def as_feature_matrix(features, name: str = "features") -> np.ndarray:
    """Coerce to a finite 2-D float array, preserving float32/float64."""
    arr = np.asarray(features)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    if arr.ndim != 2:
        raise InputFormatError(f"{name} must be a 2-D matrix, got ndim={arr.ndim}")
    if arr.size and not np.isfinite(arr).all():
        raise InputFormatError(f"{name} contains non-finite values")
    return arr


def check_positive(value: float, name: str) -> float:
    value = float(value)
    if not value > 0.0:
        raise InputFormatError(f"{name} must be > 0, got {value}")
    return value
