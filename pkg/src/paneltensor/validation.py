"""Small input-validation helpers shared across the package."""

from __future__ import annotations

import numpy as np

__all__ = ["check_matrix", "check_vector", "check_binary_matrix", "check_positive"]


def check_matrix(x, name: str, allow_nan: bool = False) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2-d array, got ndim={arr.ndim}")
    if arr.size == 0:
        raise ValueError(f"{name} must be nonempty")
    if not allow_nan and not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    if allow_nan and np.any(np.isinf(arr)):
        raise ValueError(f"{name} contains infinite entries")
    return arr


def check_vector(x, name: str, n: int | None = None) -> np.ndarray:
    arr = np.asarray(x, dtype=float).ravel()
    if arr.size == 0:
        raise ValueError(f"{name} must be nonempty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    if n is not None and arr.size != n:
        raise ValueError(f"{name} must have length {n}, got {arr.size}")
    return arr


def check_binary_matrix(x, name: str) -> np.ndarray:
    arr = check_matrix(x, name)
    if not np.all(np.isin(arr, (0.0, 1.0))):
        raise ValueError(f"{name} entries must be 0 or 1")
    return arr


def check_positive(x, name: str) -> float:
    v = float(x)
    if not np.isfinite(v) or v <= 0:
        raise ValueError(f"{name} must be a positive finite number, got {x}")
    return v
