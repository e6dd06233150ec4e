"""Input validation helpers.

All numeric surfaces of the package carry contiguous float64 data and reject
NaN/Inf at the boundary; inner loops assume inputs are already clean.
"""

from __future__ import annotations

import numpy as np


def as_float_array(x, name: str = "array", ndim: int | None = None) -> np.ndarray:
    """Coerce to a C-contiguous float64 ndarray, rejecting non-finite entries."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if arr.size and not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or infinite entries")
    return arr


def as_vector(x, name: str = "vector") -> np.ndarray:
    vec = as_float_array(x, name, ndim=1)
    if vec.size == 0:
        raise ValueError(f"{name} must be non-empty")
    return vec


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    mat = as_float_array(x, name, ndim=2)
    if mat.shape[0] == 0 or mat.shape[1] == 0:
        raise ValueError(f"{name} must have positive dimensions, got shape {mat.shape}")
    return mat


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "operands") -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what} have mismatched shapes {a.shape} and {b.shape}")


def check_labels(labels, n_classes: int, name: str = "labels") -> np.ndarray:
    """Coerce class labels to an int64 index array in [0, n_classes)."""
    arr = np.asarray(labels)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-dimensional")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        raise ValueError(f"{name} must be integer class indices")
    arr = arr.astype(np.int64, copy=False)
    if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
        raise ValueError(f"{name} must lie in [0, {n_classes}), got range "
                         f"[{arr.min()}, {arr.max()}]")
    return arr
