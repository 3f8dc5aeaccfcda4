"""Input checks shared by the estimator front-ends."""
from __future__ import annotations

import numpy as np

from .exceptions import ShapeMismatch
from .imaging import SegmentationMask


def check_images(X, channels: int | None = None, size: int | None = None, name: str = "X") -> np.ndarray:
    """Coerce to a finite float32 ``(N, C, S, S)`` batch; a single ``(C, S, S)`` image is promoted."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ShapeMismatch(f"{name} must be (N, C, H, W), got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if X.shape[2] != X.shape[3]:
        raise ShapeMismatch(f"{name} images must be square, got {X.shape[2]}x{X.shape[3]}")
    if channels is not None and X.shape[1] != channels:
        raise ShapeMismatch(f"{name} has {X.shape[1]} channels, expected {channels}")
    if size is not None and X.shape[2] != size:
        raise ShapeMismatch(f"{name} images are {X.shape[2]} px, expected {size}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    return X


def check_masks(y, n: int | None = None, size: int | None = None, name: str = "y") -> np.ndarray:
    """Coerce masks (arrays or :class:`SegmentationMask` objects) to uint8 ``(N, S, S)``."""
    if isinstance(y, SegmentationMask):
        y = [y]
    if isinstance(y, (list, tuple)):
        y = [m.labels if isinstance(m, SegmentationMask) else m for m in y]
    y = np.asarray(y)
    if y.ndim == 2:
        y = y[None]
    if y.ndim != 3:
        raise ShapeMismatch(f"{name} must be (N, H, W), got shape {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError(f"{name} labels must be 0 or 1")
    if n is not None and y.shape[0] != n:
        raise ShapeMismatch(f"{name} has {y.shape[0]} masks for {n} images")
    if size is not None and y.shape[1:] != (size, size):
        raise ShapeMismatch(f"{name} masks are {y.shape[1:]}, expected ({size}, {size})")
    return y.astype(np.uint8)


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "arrays") -> None:
    if np.shape(a) != np.shape(b):
        raise ShapeMismatch(f"{what} differ in shape: {np.shape(a)} vs {np.shape(b)}")
