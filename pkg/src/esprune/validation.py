"""Input validation helpers for the estimator API."""

from __future__ import annotations

import numpy as np


def check_image_array(X, *, dtype=np.float64) -> np.ndarray:
    """Validate a batch of images as a dense (n, channels, height, width) array."""
    X = np.asarray(X, dtype=dtype)
    if X.ndim != 4:
        raise ValueError(
            f"expected images with shape (n_samples, channels, height, width), got {X.shape}"
        )
    if X.shape[0] == 0:
        raise ValueError("empty image batch")
    if not np.isfinite(X).all():
        raise ValueError("images contain non-finite values")
    return X


def check_labels(y, n_samples: int) -> np.ndarray:
    """Validate integer class labels aligned with an image batch."""
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n_samples:
        raise ValueError(f"labels have shape {y.shape}, expected ({n_samples},)")
    if not np.issubdtype(y.dtype, np.integer):
        rounded = np.rint(np.asarray(y, dtype=float))
        if not np.array_equal(rounded, np.asarray(y, dtype=float)):
            raise ValueError("labels must be integers")
        y = rounded
    return y.astype(np.int64)


def check_is_fitted(estimator, attribute: str) -> None:
    if not hasattr(estimator, attribute):
        raise RuntimeError(
            f"{type(estimator).__name__} is not fitted yet; call fit() first"
        )
