"""Input validation helpers used by the estimator-facing surfaces."""

from __future__ import annotations

import numpy as np

from .errors import ValidationError


def as_float_array(x, name: str, *, ndim: int | None = None, length: int | None = None) -> np.ndarray:
    """Coerce to a float64 array, enforcing dimensionality/length when given."""
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ValidationError(f"{name} must be {ndim}-dimensional, got ndim={arr.ndim}")
    if length is not None and arr.shape[0] != length:
        raise ValidationError(f"{name} must have length {length}, got {arr.shape[0]}")
    return arr


def require_finite(arr: np.ndarray, name: str) -> np.ndarray:
    """Reject non-finite entries, naming the first offending index."""
    finite = np.isfinite(arr)
    if not finite.all():
        idx = np.unravel_index(int(np.argmin(finite)), arr.shape)
        loc = idx[0] if len(idx) == 1 else idx
        raise ValidationError(f"{name} contains a non-finite sample at index {loc}")
    return arr


def require_increasing(arr: np.ndarray, name: str) -> np.ndarray:
    if arr.shape[0] >= 2 and not np.all(np.diff(arr) > 0):
        bad = int(np.argmin(np.diff(arr) > 0))
        raise ValidationError(f"{name} must be strictly increasing (violated at index {bad + 1})")
    return arr


def require_positive(value: float, name: str) -> float:
    if not value > 0:
        raise ValidationError(f"{name} must be > 0, got {value}")
    return float(value)


def require_non_negative(value: float, name: str) -> float:
    if not value >= 0:
        raise ValidationError(f"{name} must be >= 0, got {value}")
    return float(value)
