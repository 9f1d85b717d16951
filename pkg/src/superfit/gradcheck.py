"""Central finite-difference checks for every differentiable op and for whole networks.

Everything here runs in float64. The error measure is elementwise::

    |analytic - numeric| / max(|analytic|, |numeric|, floor)

with ``floor = 1e-6`` so that entries whose true gradient is zero are judged
on absolute error instead of blowing up.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward
from .losses import ce_loss, combined_loss, mucs_loss, soft_cross_entropy, softmax
from .models import LeakyReLU, MaxPool2d, Model, build_middlecnn, build_tinymlp

STEP = 1e-4
OP_TOLERANCE = 1e-4
NETWORK_TOLERANCE = 1e-3
ERROR_FLOOR = 1e-6


def relative_error(analytic, numeric, floor: float = ERROR_FLOOR) -> np.ndarray:
    analytic, numeric = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = STEP, indices=None) -> np.ndarray:
    """Central differences of the scalar ``f()`` with respect to ``x`` (perturbed in place).

    With ``indices`` (flat positions) only those entries are estimated; the
    rest of the result stays zero.
    """
    grad = np.zeros_like(x, dtype=np.float64)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size) if indices is None else indices:
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


@dataclass
class CheckResult:
    name: str
    seed: int
    max_error: float
    tolerance: float
    checked: int
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return bool(self.checked > 0 and self.max_error <= self.tolerance)

    def line(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return (f"{status:4s} {self.name:<22s} seed={self.seed:<3d} max_rel_err={self.max_error:.2e} "
                f"(tol {self.tolerance:.0e}, {self.checked} entries, {self.skipped} skipped)")


def check_function(name: str, seed: int, loss_fn: Callable[[Sequence[Tensor]], Tensor],
                   inputs: Sequence[np.ndarray], tolerance: float = OP_TOLERANCE,
                   samples: int | None = None) -> CheckResult:
    """Compare AD and finite-difference gradients of ``loss_fn`` for each input array."""
    tensors = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in inputs]
    loss = loss_fn(tensors)
    backward(loss)
    analytic = [t.grad for t in tensors]
    rng = np.random.default_rng([seed, 1])
    worst, checked = 0.0, 0
    for t, g in zip(tensors, analytic):
        indices = None
        if samples is not None and t.size > samples:
            indices = rng.choice(t.size, size=samples, replace=False)

        def f():
            with ad.no_grad():
                return float(loss_fn(tensors).data)

        num = numeric_grad(f, t.data, indices=indices)
        a = g.reshape(-1) if indices is None else g.reshape(-1)[indices]
        n = num.reshape(-1) if indices is None else num.reshape(-1)[indices]
        if a.size:
            worst = max(worst, float(relative_error(a, n).max()))
        checked += a.size
    return CheckResult(name, seed, worst, tolerance, checked)


def _projection(rng, shape) -> np.ndarray:
    # a random linear read-out keeps the scalar loss from hiding sign errors
    return rng.standard_normal(shape)


def _readout(out: Tensor, weights: np.ndarray) -> Tensor:
    return ad.tensor_sum(ad.mul(out, Tensor(weights)))


def _away_from_zero(rng, shape, margin: float = 0.05) -> np.ndarray:
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, x + np.sign(x + 1e-12) * margin, x)


def _distinct(rng, shape) -> np.ndarray:
    # values spaced far apart relative to h so no max/argmax switches under perturbation
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.1 + rng.uniform(0, 0.01, n)).reshape(shape)


def _op_cases(rng) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4,))
    m1, m2 = rng.standard_normal((3, 5)), rng.standard_normal((5, 2))
    x_conv, w_conv, b_conv = rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
    x_bn, gamma, beta = rng.standard_normal((4, 2, 2, 2)), rng.standard_normal(2), rng.standard_normal(2)
    z, y = rng.standard_normal((5, 4)) * 3, rng.integers(0, 4, 5)
    soft = softmax(rng.standard_normal((5, 4)))
    r = {k: _projection(rng, s) for k, s in {
        "add": (3, 4), "mul": (3, 4), "matmul": (3, 2), "leaky": (3, 4), "lse": (5,),
        "conv": (1, 3, 5, 5), "conv_s2": (1, 3, 2, 2), "pool": (1, 2, 2, 2), "bn": (4, 2, 2, 2),
        "bn_eval": (4, 2, 2, 2), "bn2d": (6, 3), "pad": (2, 1, 5, 5), "gather": (5,), "mean": (3, 2)}.items()}
    running = (rng.standard_normal(2), rng.uniform(0.5, 2, 2))

    return {
        "add": (lambda t: _readout(ad.add(t[0], t[1]), r["add"]), [a, b]),
        "mul": (lambda t: _readout(ad.mul(t[0], t[1]), r["mul"]), [a, rng.standard_normal((3, 4))]),
        "matmul": (lambda t: _readout(ad.matmul(t[0], t[1]), r["matmul"]), [m1, m2]),
        "leaky_relu": (lambda t: _readout(ad.leaky_relu(t[0], 0.01), r["leaky"]), [_away_from_zero(rng, (3, 4))]),
        "log_sum_exp": (lambda t: _readout(ad.log_sum_exp(t[0]), r["lse"]), [z]),
        "conv2d": (lambda t: _readout(ad.conv2d(t[0], t[1], t[2], 1, 1), r["conv"]), [x_conv, w_conv, b_conv]),
        "conv2d_stride2": (lambda t: _readout(ad.conv2d(t[0], t[1], None, 2, 0), r["conv_s2"]),
                           [x_conv, w_conv]),
        "maxpool2d": (lambda t: _readout(ad.maxpool2d(t[0], 2, 2), r["pool"]), [_distinct(rng, (1, 2, 4, 4))]),
        "batchnorm_train": (lambda t: _readout(ad.batchnorm(t[0], t[1], t[2], np.zeros(2), np.ones(2), True),
                                               r["bn"]), [x_bn, gamma, beta]),
        "batchnorm_eval": (lambda t: _readout(ad.batchnorm(t[0], t[1], t[2], running[0].copy(),
                                                           running[1].copy(), False), r["bn_eval"]),
                           [x_bn, gamma, beta]),
        "batchnorm_dense": (lambda t: _readout(ad.batchnorm(t[0], t[1], t[2], np.zeros(3), np.ones(3), True),
                                               r["bn2d"]), [rng.standard_normal((6, 3)),
                                                            rng.standard_normal(3), rng.standard_normal(3)]),
        "pad2d": (lambda t: _readout(ad.pad2d(t[0], 1), r["pad"]), [rng.standard_normal((2, 1, 3, 3))]),
        "gather_rows": (lambda t: _readout(ad.gather_rows(t[0], y), r["gather"]), [z]),
        "sum_mean": (lambda t: _readout(ad.tensor_mean(ad.reshape(t[0], (3, 2, 2)), axis=2), r["mean"])
                     + ad.tensor_sum(t[0]), [a]),
        "ce_loss": (lambda t: ce_loss(t[0], y), [z]),
        "mucs_loss": (lambda t: mucs_loss(t[0], y), [_distinct(rng, (5, 4))]),
        "combined_loss": (lambda t: combined_loss(t[0], y), [_distinct(rng, (5, 4))]),
        "soft_ce_T": (lambda t: soft_cross_entropy(t[0], soft, temperature=5.0), [z]),
    }


def op_suite(seeds: Sequence[int] = range(6)) -> list[CheckResult]:
    results = []
    for seed in seeds:
        rng = np.random.default_rng([seed, 0])
        for name, (fn, inputs) in _op_cases(rng).items():
            results.append(check_function(name, seed, fn, inputs))
    return results


def _pattern_forward(model: Model, x: np.ndarray, y: np.ndarray) -> tuple[float, bytes]:
    """CE loss plus a fingerprint of the piecewise-linear region (LeakyReLU signs,
    max-pool winners) the input falls in."""
    marks = []
    with ad.no_grad():
        h = Tensor(x)
        for _, layer in model.layers:
            if isinstance(layer, LeakyReLU):
                marks.append(np.packbits(h.data > 0).tobytes())
            elif isinstance(layer, MaxPool2d):
                win = np.lib.stride_tricks.sliding_window_view(h.data, (layer.window, layer.window),
                                                               axis=(2, 3))
                win = win[:, :, ::layer.stride, ::layer.stride]
                marks.append(win.reshape(*win.shape[:4], -1).argmax(axis=-1).astype(np.uint8).tobytes())
            h = layer.forward(h, model.training)
        return float(ce_loss(h, y).data), b"".join(marks)


def model_check(model: Model, x: np.ndarray, y: np.ndarray, name: str, seed: int,
                samples: int | None = None, tolerance: float = NETWORK_TOLERANCE,
                max_tries: int = 50) -> CheckResult:
    """End-to-end CE loss gradient of ``model`` (float64, train mode) for every parameter tensor.

    A central difference is only meaningful when both ``+h`` and ``-h`` stay in
    the same linear piece of the network as the base point. Entries whose
    perturbation flips a LeakyReLU sign or a max-pool winner are counted in
    ``skipped`` and not compared; with ``samples`` set, up to ``samples`` valid
    entries per tensor are drawn.
    """
    model = model.astype(np.float64).train()
    for p in model.parameters():
        p.requires_grad = True
    backward(ce_loss(model(Tensor(x)), y))
    _, base = _pattern_forward(model, x, y)
    rng = np.random.default_rng([seed, 2])
    worst, checked, skipped = 0.0, 0, 0
    for p in model.parameters():
        flat, grad = p.data.reshape(-1), p.grad.reshape(-1)
        if samples is None or p.size <= samples:
            order, want = np.arange(p.size), p.size
        else:
            order, want = rng.permutation(p.size)[:max_tries], samples
        done = 0
        for i in order:
            if done == want:
                break
            old = flat[i]
            flat[i] = old + STEP
            up, pat_up = _pattern_forward(model, x, y)
            flat[i] = old - STEP
            down, pat_down = _pattern_forward(model, x, y)
            flat[i] = old
            if pat_up != base or pat_down != base:
                skipped += 1
                continue
            num = (up - down) / (2 * STEP)
            worst = max(worst, float(relative_error(grad[i], num)))
            done += 1
        checked += done
    return CheckResult(name, seed, worst, tolerance, checked, skipped)


def network_suite(seeds: Sequence[int] = range(3), full_middlecnn: bool = False) -> list[CheckResult]:
    """TinyMLP and a width-reduced MiddleCNN with every entry checked; optionally the
    full-width MiddleCNN with a few sampled entries per parameter tensor."""
    results = []
    for seed in seeds:
        rng = np.random.default_rng([seed, 3])
        mlp = build_tinymlp(6, 5, 3, seed=seed, dtype=np.float64)
        results.append(model_check(mlp, rng.uniform(0, 1, (4, 6)), rng.integers(0, 3, 4), "tinymlp", seed))
        cnn = build_middlecnn(1, 8, 3, channels=(2, 3, 4), hidden=6, seed=seed, dtype=np.float64)
        results.append(model_check(cnn, rng.uniform(0, 1, (2, 1, 8, 8)), rng.integers(0, 3, 2),
                                   "middlecnn_small", seed))
    if full_middlecnn:
        rng = np.random.default_rng([0, 4])
        cnn = build_middlecnn(3, 32, 10, seed=0, dtype=np.float64)
        results.append(model_check(cnn, rng.uniform(0, 1, (2, 3, 32, 32)), np.array([1, 7]),
                                   "middlecnn_full", 0, samples=3))
    return results


def run_suite(op_seeds: Sequence[int] = range(6), network_seeds: Sequence[int] = range(3),
              full_middlecnn: bool = False) -> list[CheckResult]:
    return op_suite(op_seeds) + network_suite(network_seeds, full_middlecnn)
