"""Dense float64 tensor with a per-forward-pass reverse-mode tape.

Every op builds a node only when at least one operand requires a gradient, so
inference under :func:`no_grad` (or on plain data) costs one numpy call per op.
"""

from __future__ import annotations

import contextlib
import logging
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

log = logging.getLogger(__name__)

# per-thread so concurrent inference never switches recording off for a trainer
_STATE = threading.local()

# Rows rescued by l2_normalize's near-zero branch since import.
DEGENERATE_NORMALIZE_EVENTS = 0


def grad_enabled() -> bool:
    return getattr(_STATE, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _STATE.enabled = False
    try:
        yield
    finally:
        _STATE.enabled = prev


class Tensor:
    __array_priority__ = 100.0
    __slots__ = ("data", "requires_grad", "grad", "_prev", "_backward", "degenerate", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) or data.dtype != np.float64 else data
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._prev: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.degenerate = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- autodiff ---------------------------------------------------------
    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True).reshape(self.data.shape)
        else:
            self.grad = self.grad + g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Run the tape from this node; leaf grads accumulate, the tape is freed."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.data.shape:
            raise ValueError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))

        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._prev = ()

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def mT(self):
        return swap_last(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log_(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(*shapes: tuple[int, ...]) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise ValueError(f"shape mismatch: cannot broadcast {' with '.join(map(str, shapes))}") from None


# -- elementwise binary ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _node(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * out / b.data, b.shape))

    return _node(out, (a, b), bw)


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    pick_a = a.data >= b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.where(pick_a, g, 0.0), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.where(pick_a, 0.0, g), b.shape))

    return _node(np.where(pick_a, a.data, b.data), (a, b), bw)


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    pick_a = a.data <= b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.where(pick_a, g, 0.0), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.where(pick_a, 0.0, g), b.shape))

    return _node(np.where(pick_a, a.data, b.data), (a, b), bw)


def where(cond, a, b) -> Tensor:
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(cond.shape, a.shape, b.shape)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.where(cond, g, 0.0), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.where(cond, 0.0, g), b.shape))

    return _node(np.where(cond, a.data, b.data), (a, b), bw)


# -- elementwise unary ----------------------------------------------------

def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: a._accumulate(-g))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    return _node(a.data**exponent, (a,), lambda g: a._accumulate(g * exponent * a.data ** (exponent - 1)))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: a._accumulate(g * out))


def log_(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: a._accumulate(g / a.data))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: a._accumulate(g * 0.5 / out))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: a._accumulate(g * (1.0 - out * out)))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _node(out, (a,), lambda g: a._accumulate(g * out * (1.0 - out)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def log_sigmoid(a) -> Tensor:
    """log(sigmoid(x)) without overflow."""
    a = as_tensor(a)
    x = a.data
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    return _node(out, (a,), lambda g: a._accumulate(g * _sigmoid(-x)))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _node(np.where(pos, a.data, 0.0), (a,), lambda g: a._accumulate(np.where(pos, g, 0.0)))


_SQRT1_2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def gelu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT1_2))

    def bw(g):
        a._accumulate(g * (cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)))

    return _node(x * cdf, (a,), bw)


def tabs(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.abs(a.data), (a,), lambda g: a._accumulate(g * np.sign(a.data)))


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to [lo, hi]; the gradient is passed only where the input is strictly inside."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data > lo
    if hi is not None:
        inside &= a.data < hi
    return _node(out, (a,), lambda g: a._accumulate(np.where(inside, g, 0.0)))


def straight_through(hard, soft) -> Tensor:
    """Forward value ``hard`` (bit-exact); backward passes the gradient to ``soft``."""
    soft = as_tensor(soft)
    hard = np.asarray(hard, dtype=np.float64)
    if hard.shape != soft.shape:
        raise ValueError(f"shape mismatch: hard {hard.shape} vs soft {soft.shape}")
    return _node(hard.copy(), (soft,), lambda g: soft._accumulate(g))


# -- reductions -----------------------------------------------------------

def _expand_reduced(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    return _node(
        np.asarray(a.data.sum(axis=axis, keepdims=keepdims)),
        (a,),
        lambda g: a._accumulate(_expand_reduced(g, a.shape, axis, keepdims)),
    )


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    n = a.data.size // max(out.size, 1) if a.data.size else 1
    return _node(out, (a,), lambda g: a._accumulate(_expand_reduced(g, a.shape, axis, keepdims) / n))


def tmax(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Max along one axis; the gradient goes to the first maximal entry."""
    a = as_tensor(a)
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)

    def bw(g):
        full = np.zeros_like(a.data)
        gg = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(full, np.expand_dims(idx, axis), gg, axis=axis)
        a._accumulate(full)

    return _node(out if keepdims else np.squeeze(out, axis=axis), (a,), bw)


# -- shape ----------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"shape mismatch: cannot reshape {a.shape} to {tuple(shape)}") from None
    return _node(out, (a,), lambda g: a._accumulate(g.reshape(a.shape)))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _node(np.transpose(a.data, axes), (a,), lambda g: a._accumulate(np.transpose(g, inv)))


def swap_last(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.swapaxes(a.data, -1, -2), (a,), lambda g: a._accumulate(np.swapaxes(g, -1, -2)))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accumulate(full)

    return _node(a.data[idx], (a,), bw)


def gather(a, indices, axis: int = 0) -> Tensor:
    """Select slices of ``a`` along ``axis`` (repeats allowed)."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.int64)
    n = a.shape[axis]
    if indices.size and (indices.min() < -n or indices.max() >= n):
        raise IndexError(f"gather index out of range for axis {axis} of extent {n}")
    if indices.ndim != 1 and axis % a.ndim != 0:
        raise ValueError("multi-dimensional gather indices are only supported on axis 0")
    out = np.take(a.data, indices, axis=axis)

    def bw(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0) if indices.ndim == 1 else g)
        a._accumulate(full)

    return _node(out, (a,), bw)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ValueError(f"shape mismatch in concat: {[t.shape for t in ts]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        for t, piece in zip(ts, np.split(g, bounds, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return _node(out, ts, bw)


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ValueError(f"shape mismatch in stack: {[t.shape for t in ts]}") from exc

    def bw(g):
        for i, t in enumerate(ts):
            if t.requires_grad:
                t._accumulate(np.take(g, i, axis=axis))

    return _node(out, ts, bw)


def masked_fill(a, mask, value: float) -> Tensor:
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    _broadcast_shape(a.shape, mask.shape)
    out = np.where(mask, value, a.data)
    return _node(out, (a,), lambda g: a._accumulate(_unbroadcast(np.where(mask, 0.0, g), a.shape)))


# -- linear algebra -------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ValueError(f"matmul needs operands of rank >= 1, got {a.shape} and {b.shape}")
    if a.ndim == 1:
        out = matmul(reshape(a, (1, a.shape[0])), b)
        return reshape(out, out.shape[:-2] + out.shape[-1:])
    if b.ndim == 1:
        out = matmul(a, reshape(b, (b.shape[0], 1)))
        return reshape(out, out.shape[:-1])
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"shape mismatch in matmul: {a.shape} @ {b.shape}")
    _broadcast_shape(a.shape[:-2], b.shape[:-2])

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _node(a.data @ b.data, (a, b), bw)


# -- normalisations -------------------------------------------------------

def softmax(a, axis: int = -1, mask=None) -> Tensor:
    """Softmax along ``axis``.

    ``mask`` (broadcastable booleans) excludes entries exactly as a -inf fill
    would, without putting non-finite values in the graph. A slice with no
    valid entry is rejected.
    """
    a = as_tensor(a)
    if a.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=axis).all():
            raise ValueError("softmax with every entry masked along the axis")
        x = np.where(mask, x, -np.inf)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        a._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _node(out, (a,), bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if a.shape[axis] == 0:
        raise ValueError("log_softmax over an empty axis")
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return _node(out, (a,), lambda g: a._accumulate(g - p * g.sum(axis=axis, keepdims=True)))


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance (no affine)."""
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        a._accumulate(inv * (g - gm - xhat * gx))

    return _node(xhat, (a,), bw)


def l2_normalize(a, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale each slice along ``axis`` to unit Euclidean norm.

    Slices with norm below ``eps`` map to zero with zero gradient; those rows
    are reported on ``out.degenerate`` and counted globally.
    """
    global DEGENERATE_NORMALIZE_EVENTS
    a = as_tensor(a)
    x = a.data
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    bad = norm < eps
    safe = np.where(bad, 1.0, norm)
    out = np.where(bad, 0.0, x / safe)
    n_bad = int(bad.sum())
    if n_bad:
        DEGENERATE_NORMALIZE_EVENTS += n_bad
        log.debug("l2_normalize: %d near-zero slice(s) mapped to zero", n_bad)

    def bw(g):
        proj = (g * out).sum(axis=axis, keepdims=True)
        a._accumulate(np.where(bad, 0.0, (g - out * proj) / safe))

    t = _node(out, (a,), bw)
    t.degenerate = np.squeeze(bad, axis=axis)
    return t
