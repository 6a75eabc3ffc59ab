"""Small input-validation helpers used across the public API."""

from __future__ import annotations

import math

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import InputError, NonPositiveInput


def check_points(X, *, name="X", min_points=1) -> np.ndarray:
    """Return ``X`` as a finite float64 array of shape (n, 3)."""
    try:
        arr = check_array(X, dtype=np.float64, ensure_2d=True,
                          ensure_min_samples=min_points, ensure_all_finite=True)
    except ValueError as exc:
        raise InputError(f"{name}: {exc}") from exc
    if arr.shape[1] != 3:
        raise InputError(f"{name}: expected 3 columns (x, y, z), got {arr.shape[1]}")
    return arr


def check_vector(v, *, name="vector") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.shape != (3,):
        raise InputError(f"{name}: expected a 3-vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name}: non-finite component")
    return arr


def check_positive(value, name, *, strict=True) -> float:
    v = float(value)
    if not math.isfinite(v) or (v <= 0 if strict else v < 0):
        bound = "> 0" if strict else ">= 0"
        raise NonPositiveInput(f"{name} must be {bound}, got {value!r}")
    return v


def check_positive_int(value, name) -> int:
    if isinstance(value, bool) or int(value) != value or int(value) < 1:
        raise NonPositiveInput(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_probability(value, name) -> float:
    p = float(value)
    if not 0.0 <= p <= 1.0:
        raise InputError(f"{name} must lie in [0, 1], got {value!r}")
    return p


def edge_length(a, b) -> float:
    """Euclidean distance computed one way everywhere, so exact range checks agree."""
    dx = float(a[0]) - float(b[0])
    dy = float(a[1]) - float(b[1])
    dz = float(a[2]) - float(b[2])
    return math.sqrt(dx * dx + dy * dy + dz * dz)
