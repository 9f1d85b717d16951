"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""

from __future__ import annotations

import numpy as np

from .exceptions import DimensionError, ParameterError


def check_labels(y, num_classes: int | None = None, n: int | None = None) -> np.ndarray:
    """Return ``y`` as a 1-D int64 array, checking range and length."""
    y = np.asarray(y)
    if y.ndim == 0:
        y = y.reshape(1)
    if y.ndim != 1:
        raise DimensionError(f"labels must be 1-D, got shape {y.shape}")
    if y.size and not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ParameterError("labels must be integers")
    y = y.astype(np.int64)
    if n is not None and len(y) != n:
        raise DimensionError(f"expected {n} labels, got {len(y)}")
    if y.size and (y.min() < 0 or (num_classes is not None and y.max() >= num_classes)):
        raise ParameterError(f"labels must lie in [0, {num_classes})")
    return y


def check_logits_batch(z: np.ndarray, y) -> np.ndarray:
    """Validate a (B, K) logits array against its labels; return the labels."""
    if z.ndim != 2:
        raise DimensionError(f"logits must be (B, K), got shape {z.shape}")
    if z.shape[1] < 2:
        raise ParameterError("need at least two classes")
    return check_labels(y, z.shape[1], z.shape[0])


def check_images(x, dtype=np.float32, box: bool = True) -> np.ndarray:
    """Return ``x`` as a finite float array, optionally asserting ``[0, 1]``."""
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(dtype)
    elif dtype is not None and x.dtype != dtype:
        x = x.astype(dtype)
    if x.ndim < 2:
        raise DimensionError(f"expected a batch with a leading example axis, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise ParameterError("inputs contain non-finite values")
    if box and x.size and (x.min() < 0 or x.max() > 1):
        raise ParameterError("inputs must lie in [0, 1]")
    return x
