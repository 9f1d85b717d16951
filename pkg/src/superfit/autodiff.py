"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers
its operands and a closure mapping the output adjoint to operand adjoints.
:func:`backward` orders the reachable graph into a :class:`Tape` and replays
those closures in reverse. A graph can be replayed exactly once; afterwards
its nodes are released and a second ``backward`` raises :class:`UsageError`.

Only the operations needed by the networks in :mod:`superfit.models` are
provided. Broadcasting is limited to what elementwise add/mul need.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import DimensionError, StatisticsError, UsageError

DEFAULT_DTYPE = np.float32

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Run forward ops without recording them (thread-local)."""
    previous = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class Tensor:
    """An n-dimensional float array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_released")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE if dtype is None else dtype)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = ""
        self._released = False

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def backward(self, grad=None) -> None:
        backward(self, grad)

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self.dtype)))

    def __rsub__(self, other):
        return add(_lift(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UsageError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def mean(self, axis=None):
        return tensor_mean(self, axis)


def _lift(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise FloatingPointError(f"{op} produced non-finite values")
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Tape and backward
# ---------------------------------------------------------------------------


class Tape:
    """Recorded operations reachable from ``root``, operands before results."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen:
                continue
            if node._released:
                raise UsageError("graph was already consumed by a previous backward()")
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(self.root): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                if node.is_leaf and node.grad is not None:
                    node.grad = node.grad + g
                else:
                    node.grad = g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    def release(self) -> None:
        for node in self.nodes:
            if node._backward is not None:
                node._parents = ()
                node._backward = None
                node._released = True


def backward(loss: Tensor, grad=None) -> None:
    """Populate ``.grad`` on every tensor in ``loss``'s graph that requires it.

    The graph is consumed: intermediate nodes are released afterwards.
    """
    if loss.size != 1 and grad is None:
        raise UsageError("backward() needs a scalar loss or an explicit output gradient")
    if loss._released:
        raise UsageError("graph was already consumed by a previous backward()")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor that requires grad")
    seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.dtype)
    tape = Tape(loss)
    tape.replay(seed)
    tape.release()


# ---------------------------------------------------------------------------
# Elementwise and shape ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a.dtype)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _result(a.data + b.data, (a, b), bw, "add")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = _lift(a)
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        # plain float keeps the tensor's precision
        scale = float(b)

        def bw_scalar(g):
            return (g * scale,)

        return _result(a.data * scale, (a,), bw_scalar, "mul")
    b = _lift(b, a.dtype)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g * b.data, sa), _unbroadcast(g * a.data, sb)

    return _result(a.data * b.data, (a, b), bw, "mul")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def tensor_sum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis)), (a,), bw, "sum")


def tensor_mean(a: Tensor, axis=None) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    return tensor_sum(a, axis) * (1.0 / count)


def gather_rows(z: Tensor, index) -> Tensor:
    """Pick ``z[i, index[i]]`` for every row of a 2-D tensor."""
    index = np.asarray(index, dtype=np.int64)
    if z.ndim != 2 or index.shape != (z.shape[0],):
        raise DimensionError(f"gather_rows expects (B, K) and (B,), got {z.shape} and {index.shape}")
    rows = np.arange(z.shape[0])
    shape = z.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[rows, index] = g
        return (out,)

    return _result(z.data[rows, index], (z,), bw, "gather_rows")


def pad2d(x: Tensor, pad: int) -> Tensor:
    """Zero-pad the two trailing spatial axes of a 4-D tensor."""
    if pad == 0:
        return x
    widths = ((0, 0), (0, 0), (pad, pad), (pad, pad))

    def bw(g):
        return (g[:, :, pad:-pad, pad:-pad],)

    return _result(np.pad(x.data, widths), (x,), bw, "pad2d")


# ---------------------------------------------------------------------------
# Network primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not align")

    def bw(g):
        return (
            g @ b.data.T if a.requires_grad else None,
            a.data.T @ g if b.requires_grad else None,
        )

    return _result(a.data @ b.data, (a, b), bw, "matmul")


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    positive = x.data > 0
    out = np.where(positive, x.data, x.data * slope)

    def bw(g):
        return (np.where(positive, g, g * slope),)

    return _result(out, (x,), bw, "leaky_relu")


def log_sum_exp(z: Tensor, axis: int = -1) -> Tensor:
    """``log(sum(exp(z)))`` along ``axis`` in max-shifted form."""
    z = _lift(z)
    m = z.data.max(axis=axis, keepdims=True)
    e = np.exp(z.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (m + np.log(s)).squeeze(axis)

    def bw(g):
        return (np.expand_dims(g, axis) * (e / s),)

    return _result(out, (z,), bw, "log_sum_exp")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x`` (B,C,H,W) with ``w`` (F,C,kh,kw)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d shapes {x.shape} and {w.shape} do not align")
    B, C, H, W = x.shape
    F, _, kh, kw = w.shape
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    if (Hp - kh) % stride or (Wp - kw) % stride:
        raise DimensionError("conv2d output size is not integral for this stride")
    Ho, Wo = (Hp - kh) // stride + 1, (Wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    wmat = w.data.reshape(F, -1)
    out = cols @ wmat.T
    if b is not None:
        out = out + b.data
    out = out.reshape(B, Ho, Wo, F).transpose(0, 3, 1, 2)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, F)
        dw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        db = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(B, Ho, Wo, C, kh, kw)
            dxp = np.zeros((B, C, Hp, Wp), dtype=g.dtype)
            hi, wi = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + hi:stride, j:j + wi:stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            dx = dxp[:, :, padding:padding + H, padding:padding + W] if padding else dxp
        return dx, dw, db

    parents = (x, w) if b is None else (x, w, b)
    return _result(np.ascontiguousarray(out), parents, bw, "conv2d")


def maxpool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Windowed maximum; ties route the gradient to the lowest flat index."""
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects a 4-D tensor, got {x.shape}")
    B, C, H, W = x.shape
    if window > H or window > W:
        raise DimensionError(f"pool window {window} larger than input {H}x{W}")
    if (H - window) % stride or (W - window) % stride:
        raise DimensionError(f"input {H}x{W} does not tile with window {window}, stride {stride}")
    Ho, Wo = (H - window) // stride + 1, (W - window) // stride + 1
    windows = sliding_window_view(x.data, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = windows.reshape(B, C, Ho, Wo, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        dx = np.zeros(x.shape, dtype=g.dtype)
        bi, ci, hi, wi = np.indices((B, C, Ho, Wo), sparse=True)
        rows = hi * stride + arg // window
        cols = wi * stride + arg % window
        if stride >= window:
            dx[bi, ci, rows, cols] = g
        else:
            np.add.at(dx, (bi, ci, rows, cols), g)
        return (dx,)

    return _result(np.ascontiguousarray(out), (x,), bw, "maxpool2d")


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over (B,C) or (B,C,H,W) input.

    In training mode ``running_mean``/``running_var`` are updated in place.
    """
    if x.ndim not in (2, 4):
        raise DimensionError(f"batchnorm expects 2-D or 4-D input, got {x.shape}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
    g_ = gamma.data.reshape(bshape)
    b_ = beta.data.reshape(bshape)

    if training:
        if x.shape[0] < 2:
            raise StatisticsError("batchnorm needs at least 2 examples in training mode")
        n = x.size // x.shape[1]
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / (n - 1))
    else:
        mean, var = running_mean, running_var

    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype).reshape(bshape)
    xhat = (x.data - mean.reshape(bshape)) * inv_std
    out = xhat * g_ + b_

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * g_
        if training:
            m = x.size // x.shape[1]
            dx = inv_std / m * (
                m * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            dx = dxhat * inv_std
        return dx, dgamma, dbeta

    return _result(out, (x, gamma, beta), bw, "batchnorm")
