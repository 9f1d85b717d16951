"""Classification losses on logits, their closed-form gradients, and the
saturation test behind super-fitting.

All batch losses accept ``reduction`` in {"mean", "sum", "none"}; training
uses the mean so learning-rate semantics do not depend on batch size.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, gather_rows, log_sum_exp, tensor_mean, tensor_sum
from .exceptions import ParameterError
from .validation import check_logits_batch


def _reduce(per_example: Tensor, reduction: str) -> Tensor:
    if reduction == "mean":
        return tensor_mean(per_example, axis=0)
    if reduction == "sum":
        return tensor_sum(per_example, axis=0)
    if reduction == "none":
        return per_example
    raise ParameterError(f"unknown reduction {reduction!r}")


def _as_logits(z) -> Tensor:
    return z if isinstance(z, Tensor) else Tensor(z)


def softmax(z, temperature: float = 1.0) -> np.ndarray:
    """Row softmax of ``z / temperature`` using shifted exponentials."""
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    z = np.asarray(z.data if isinstance(z, Tensor) else z)
    scaled = z / z.dtype.type(temperature) if temperature != 1 else z
    e = np.exp(scaled - scaled.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


softmax_temperature = softmax


def ce_loss(z, y, reduction: str = "mean") -> Tensor:
    """Cross-entropy ``-z_y + logsumexp(z)`` per example."""
    z = _as_logits(z)
    y = check_logits_batch(z.data, y)
    per = log_sum_exp(z, axis=1) - gather_rows(z, y)
    return _reduce(per, reduction)


def ce_grad_logits(z, y) -> np.ndarray:
    """Per-example ``dCE/dz = softmax(z) - onehot(y)``.

    Equals the autodiff gradient of ``ce_loss(z, y, reduction="sum")``.
    """
    z_arr = np.asarray(z.data if isinstance(z, Tensor) else z)
    y = check_logits_batch(z_arr, y)
    grad = softmax(z_arr)
    grad[np.arange(len(y)), y] -= 1
    return grad


def is_gradient_vanished(z, y) -> np.ndarray:
    """Boolean mask of rows whose CE logits-gradient is exactly zero.

    A row qualifies only if the softmax is bit-exactly the one-hot target in
    the working precision, i.e. every other class underflowed to 0.
    """
    z_arr = np.asarray(z.data if isinstance(z, Tensor) else z)
    y = check_logits_batch(z_arr, y)
    probs = softmax(z_arr)
    onehot = np.zeros_like(probs)
    onehot[np.arange(len(y)), y] = 1
    zero_grad = ~np.any(probs - onehot, axis=1)
    return zero_grad & np.all(probs == onehot, axis=1)


def runner_up(z, y) -> np.ndarray:
    """Index of the largest logit other than the true class (ties: lowest)."""
    z_arr = np.array(z.data if isinstance(z, Tensor) else z, dtype=np.float64)
    y = check_logits_batch(z_arr, y)
    z_arr[np.arange(len(y)), y] = -np.inf
    return z_arr.argmax(axis=1)


def mucs_loss(z, y, reduction: str = "mean") -> Tensor:
    """Unrelated-category score gap ``z_s - z_y`` with ``s`` the runner-up class."""
    z = _as_logits(z)
    y = check_logits_batch(z.data, y)
    s = runner_up(z.data, y)
    per = gather_rows(z, s) - gather_rows(z, y)
    return _reduce(per, reduction)


def combined_loss(z, y, mucs_weight: float = 1.0, reduction: str = "mean") -> Tensor:
    """Super-fitting objective: cross-entropy plus the MUCS gap."""
    z = _as_logits(z)
    ce = ce_loss(z, y, reduction)
    gap = mucs_loss(z, y, reduction)
    if mucs_weight != 1.0:
        gap = gap * mucs_weight
    return ce + gap


def soft_cross_entropy(z, targets, temperature: float = 1.0, reduction: str = "mean") -> Tensor:
    """Cross-entropy of ``softmax(z / T)`` against a soft target distribution."""
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    z = _as_logits(z)
    targets = np.asarray(targets, dtype=z.dtype)
    if targets.shape != z.shape:
        raise ParameterError(f"targets shape {targets.shape} does not match logits {z.shape}")
    scaled = z * (1.0 / temperature) if temperature != 1 else z
    per = log_sum_exp(scaled, axis=1) - tensor_sum(scaled * Tensor(targets), axis=1)
    return _reduce(per, reduction)


def temperature_ce_loss(z, y, temperature: float, reduction: str = "mean") -> Tensor:
    """Hard-label cross-entropy on temperature-scaled logits."""
    z = _as_logits(z)
    y = check_logits_batch(z.data, y)
    onehot = np.zeros(z.shape, dtype=z.dtype)
    onehot[np.arange(len(y)), y] = 1
    return soft_cross_entropy(z, onehot, temperature, reduction)
