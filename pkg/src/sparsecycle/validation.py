"""Input checks shared by the estimator API and the CLI."""
from __future__ import annotations

from typing import Optional

import numpy as np

RANGE_SLACK = 1e-6


def check_images(
    X,
    name: str = "X",
    *,
    channels: Optional[int] = None,
    multiple_of: int = 4,
    value_range: bool = True,
) -> np.ndarray:
    """Return ``X`` as a contiguous float32 (N, C, H, W) batch.

    A single (C, H, W) image is promoted to a batch of one. Rejects
    non-finite values, values outside [-1, 1] and spatial sizes that are not
    multiples of ``multiple_of``.
    """
    try:
        arr = np.asarray(X, dtype=np.float32)
    except (TypeError, ValueError) as exc:
        raise TypeError(f"{name} must be a numeric array, got {type(X).__name__}") from exc
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"{name} must have shape (N, C, H, W) or (C, H, W), got {arr.shape}")
    n, c, h, w = arr.shape
    if n == 0:
        raise ValueError(f"{name} is empty")
    if channels is not None and c != channels:
        raise ValueError(f"{name} has {c} channels, expected {channels}")
    if multiple_of > 1 and (h % multiple_of or w % multiple_of):
        raise ValueError(f"{name} spatial size {h}x{w} is not divisible by {multiple_of}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains NaN or infinite values")
    if value_range:
        lo, hi = float(arr.min()), float(arr.max())
        if lo < -1.0 - RANGE_SLACK or hi > 1.0 + RANGE_SLACK:
            raise ValueError(f"{name} values must lie in [-1, 1], got [{lo:.4g}, {hi:.4g}]")
    return np.ascontiguousarray(arr)


def check_pair(X, y, **kwargs):
    """Validate a blurry/sharp batch pair of identical shape."""
    X = check_images(X, "X", **kwargs)
    y = check_images(y, "y", **kwargs)
    if X.shape != y.shape:
        raise ValueError(f"X and y shapes differ: {X.shape} vs {y.shape}")
    return X, y


def check_positive_int(value, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)
