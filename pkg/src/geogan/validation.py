"""Input validation helpers for the estimator-style API."""
from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import ValidationError


def _as_float_nd(X, name: str, dtype=np.float32) -> np.ndarray:
    try:
        return check_array(X, ensure_2d=False, allow_nd=True, dtype=dtype,
                           ensure_all_finite=True, input_name=name)
    except ValueError as exc:
        raise ValidationError(f"{name}: {exc}") from exc


def check_maps(X, name: str = "X", unit_range: bool = False) -> np.ndarray:
    """Return a float64 (n, H, W) stack; a single (H, W) map is promoted."""
    arr = _as_float_nd(X, name, np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValidationError(f"{name} must be (n, H, W), got shape {arr.shape}")
    if unit_range and (arr.min() < 0 or arr.max() > 1):
        raise ValidationError(f"{name} values must lie in [0, 1]")
    return arr


def check_inputs(X, n_channels: Optional[int] = None, size: Optional[int] = None,
                 name: str = "X") -> np.ndarray:
    """Return float32 (n, C, H, W) input planes. The last channel is the water mask."""
    arr = _as_float_nd(X, name)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValidationError(f"{name} must be (n, C, H, W), got shape {arr.shape}")
    if n_channels is not None and arr.shape[1] != n_channels:
        raise ValidationError(f"{name} has {arr.shape[1]} channels, expected {n_channels}")
    if size is not None and arr.shape[2:] != (size, size):
        raise ValidationError(f"{name} is {arr.shape[2]}x{arr.shape[3]}, model expects {size}x{size}")
    water = arr[:, -1]
    if not np.all((water == 0) | (water == 1)):
        raise ValidationError(f"{name}: last channel (water mask) must be binary")
    return arr


def check_targets(y, X: np.ndarray, name: str = "y") -> np.ndarray:
    arr = _as_float_nd(y, name)
    if arr.ndim == 4 and arr.shape[1] == 1:
        arr = arr[:, 0]
    if arr.shape != (X.shape[0],) + X.shape[2:]:
        raise ValidationError(f"{name} shape {arr.shape} does not match inputs {X.shape}")
    if arr.min() < 0 or arr.max() > 1:
        raise ValidationError(f"{name} values must lie in [0, 1]")
    return arr
