"""Differentiable operations on :class:`~chardiff.numerics.tensor.Tensor`.

Every op computes its forward value with numpy and returns a tensor carrying a
closure ``backward(g) -> tuple of parent gradients`` (``None`` for parents that
need none).  Shapes follow numpy broadcasting where that makes sense; image
ops use NCHW layout.
"""
from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor


class ShapeError(ValueError):
    """Operand shapes do not conform for an op."""


def _shape_error(op: str, *shapes) -> ShapeError:
    return ShapeError(f"{op}: incompatible shapes " + ", ".join(str(tuple(s)) for s in shapes))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise _shape_error(op, a.shape, b.shape) from None


def _coerce(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)
    _broadcast_shape("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)
    _broadcast_shape("mul", a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data * b.data, (a, b), backward)


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig

    def backward(g):
        return (g * (sig * (1.0 + x.data * (1.0 - sig))),)

    return Tensor._from_op(out, (x,), backward)


# -- reductions ----------------------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._from_op(np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    s = sum(x, axis=axis, keepdims=keepdims)
    return mul(s, 1.0 / count)


def mse(pred: Tensor, target) -> Tensor:
    """Mean of squared differences over every element."""
    target = _coerce(target, pred)
    if pred.shape != target.shape:
        raise _shape_error("mse", pred.shape, target.shape)
    diff = pred.data - target.data
    n = diff.size
    out = np.asarray((diff * diff).sum() / n, dtype=pred.dtype)

    def backward(g):
        d = (2.0 / n) * g * diff
        return d, -d

    return Tensor._from_op(out, (pred, target), backward)


# -- shape manipulation ----------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise _shape_error("reshape", x.shape, shape) from None

    def backward(g):
        return (g.reshape(x.shape),)

    return Tensor._from_op(out, (x,), backward)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None or len(axes) == 0:
        axes = tuple(reversed(range(x.ndim)))
    inverse = np.argsort(axes)

    def backward(g):
        return (g.transpose(inverse),)

    return Tensor._from_op(x.data.transpose(axes), (x,), backward)


def concat(xs: Iterable[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise _shape_error("concat", *[x.shape for x in xs]) from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(out, xs, backward)


def take_rows(table: Tensor, ids) -> Tensor:
    """Gather rows of a 2-D table; ids may have any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise _shape_error("take_rows", table.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"take_rows: id out of range [0, {table.shape[0]})")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return Tensor._from_op(table.data[ids], (table,), backward)


# -- linear algebra --------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a = _coerce(a)
    b = _coerce(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise _shape_error("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise _shape_error("matmul", a.shape, b.shape) from None

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis; weight is (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise _shape_error("linear", x.shape, weight.shape)
    y = matmul(x, transpose(weight, (1, 0)))
    return y if bias is None else add(y, bias)


# -- softmax -------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Softmax along ``axis``.

    With a boolean ``mask`` (broadcastable to x) the positions where the mask
    is False are excluded from the normalization and receive exactly zero
    weight.  A slice with no admitted position yields all zeros.
    """
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    logits = x.data
    if mask is None:
        shifted = logits - logits.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=axis, keepdims=True)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
        filled = np.where(mask, logits, -np.inf)
        top = filled.max(axis=axis, keepdims=True)
        top = np.where(np.isfinite(top), top, 0.0)
        e = np.where(mask, np.exp(np.where(mask, logits - top, 0.0)), 0.0)
        denom = e.sum(axis=axis, keepdims=True)
        out = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)
    out = out.astype(x.dtype, copy=False)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return Tensor._from_op(out, (x,), backward)


# -- normalization ---------------------------------------------------------------

def group_norm(x: Tensor, groups: int, weight: Tensor | None = None,
               bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Group normalization of an (N, C, ...) tensor with per-channel affine."""
    n, c = x.shape[:2]
    if c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible by {groups} groups")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(x.shape)

    def backward(g):
        gg = g.reshape(n, groups, -1)
        xh = xhat.reshape(n, groups, -1)
        gx = inv * (gg - gg.mean(axis=2, keepdims=True) - xh * (gg * xh).mean(axis=2, keepdims=True))
        return (gx.reshape(x.shape),)

    out = Tensor._from_op(xhat.astype(x.dtype, copy=False), (x,), backward)
    if weight is not None:
        bshape = (1, c) + (1,) * (x.ndim - 2)
        out = mul(out, reshape(weight, bshape))
        if bias is not None:
            out = add(out, reshape(bias, bshape))
    return out


# -- spatial -------------------------------------------------------------------

def _im2col_nhwc(x: np.ndarray, k: int) -> np.ndarray:
    """(N, H, W, C) -> (N*H*W, k*k*C) patches with 'same' zero padding."""
    n, h, w, c = x.shape
    if k == 1:
        return np.ascontiguousarray(x).reshape(n * h * w, c)
    p = k // 2
    xp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=x.dtype)
    xp[:, p:p + h, p:p + w] = x
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # n, h, w, c, k, k
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * h * w, k * k * c)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 convolution with 'same' zero padding (odd square kernels).

    x is (N, Cin, H, W), weight is (Cout, Cin, k, k).  Implemented as an
    im2col matrix product in channels-last order; the input gradient is the
    same product against the spatially flipped, transposed kernel.
    """
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise _shape_error("conv2d", x.shape, weight.shape)
    k = weight.shape[2]
    if weight.shape[3] != k or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be odd and square, got {weight.shape[2:]}")
    n, cin, h, w = x.shape
    cout = weight.shape[0]
    cols = _im2col_nhwc(x.data.transpose(0, 2, 3, 1), k)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(cout, k * k * cin)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, h, w, cout).transpose(0, 3, 1, 2)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g_nhwc = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
        g2 = g_nhwc.reshape(n * h * w, cout)
        gw = None
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(cout, k, k, cin).transpose(0, 3, 1, 2)
        gx = None
        if x.requires_grad:
            # rows ordered (i, j, cout) to match _im2col_nhwc of the gradient
            wflip = weight.data[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(k * k * cout, cin)
            gx = (_im2col_nhwc(g_nhwc, k) @ wflip).reshape(n, h, w, cin).transpose(0, 3, 1, 2)
        grads = (gx, gw)
        if bias is not None:
            grads += (g2.sum(axis=0),)
        return grads

    return Tensor._from_op(out, parents, backward)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of the last two axes."""
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def backward(g):
        s = g.shape
        return (g.reshape(*s[:-2], s[-2] // 2, 2, s[-1] // 2, 2).sum(axis=(-3, -1)),)

    return Tensor._from_op(out, (x,), backward)


def avgpool2x(x: Tensor) -> Tensor:
    """2x2 average pooling of the last two axes (both must be even)."""
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2x: spatial dims must be even, got {(h, w)}")
    out = x.data.reshape(*x.shape[:-2], h // 2, 2, w // 2, 2).mean(axis=(-3, -1))

    def backward(g):
        return (0.25 * g.repeat(2, axis=-2).repeat(2, axis=-1),)

    return Tensor._from_op(out, (x,), backward)
