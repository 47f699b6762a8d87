"""Differentiable primitives.

Every primitive computes its forward value with numpy, saves what its backward
rule needs in ``ctx`` and registers that rule under its primitive id.
Images are NCHW throughout.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..exceptions import ValidationError
from .tensor import Tensor, as_tensor, make_node, note_kink_input, register

LEAKY_SLOPE = 0.2


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise arithmetic --------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_node(a.data + b.data, "add", (a, b), (a.shape, b.shape))


@register("add")
def _add_backward(ctx, g):
    sa, sb = ctx
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_node(a.data - b.data, "sub", (a, b), (a.shape, b.shape))


@register("sub")
def _sub_backward(ctx, g):
    sa, sb = ctx
    return _unbroadcast(g, sa), -_unbroadcast(g, sb)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_node(a.data * b.data, "mul", (a, b), (a.data, b.data))


@register("mul")
def _mul_backward(ctx, g):
    a, b = ctx
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = x.data.dtype.type(c)
    return make_node(x.data * c, "scale", (x,), c)


@register("scale")
def _scale_backward(c, g):
    return (g * c,)


# -- reductions and shape ----------------------------------------------------

def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    return make_node(np.asarray(out), "sum", (x,), (x.shape, axis, keepdims))


@register("sum")
def _sum_backward(ctx, g):
    shape, axis, keepdims = ctx
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, shape).copy(),)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return make_node(np.asarray(out), "mean", (x,), (x.shape, axis, keepdims, count))


@register("mean")
def _mean_backward(ctx, g):
    shape, axis, keepdims, count = ctx
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g / count, shape).copy(),)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return make_node(x.data.reshape(shape), "reshape", (x,), x.shape)


@register("reshape")
def _reshape_backward(shape, g):
    return (g.reshape(shape),)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return make_node(out, "concat", tensors, (axis, np.cumsum(sizes)[:-1]))


@register("concat")
def _concat_backward(ctx, g):
    axis, splits = ctx
    return tuple(np.split(g, splits, axis=axis))


# -- pointwise nonlinearities ------------------------------------------------

def abs(x) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    note_kink_input(x.data)
    return make_node(np.abs(x.data), "abs", (x,), np.sign(x.data))


@register("abs")
def _abs_backward(sign, g):
    return (g * sign,)


def relu(x) -> Tensor:
    x = as_tensor(x)
    note_kink_input(x.data)
    mask = x.data > 0
    return make_node(x.data * mask, "relu", (x,), mask)


@register("relu")
def _relu_backward(mask, g):
    return (g * mask,)


def leaky_relu(x, slope: float = LEAKY_SLOPE) -> Tensor:
    x = as_tensor(x)
    note_kink_input(x.data)
    factor = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return make_node(x.data * factor, "leaky_relu", (x,), factor)


@register("leaky_relu")
def _leaky_relu_backward(factor, g):
    return (g * factor,)


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _stable_sigmoid(x.data)
    return make_node(y, "sigmoid", (x,), y)


@register("sigmoid")
def _sigmoid_backward(y, g):
    return (g * y * (1.0 - y),)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return make_node(y, "tanh", (x,), y)


@register("tanh")
def _tanh_backward(y, g):
    return (g * (1.0 - y * y),)


def dropout(x, p: float, rng: Optional[np.random.Generator], training: bool = True) -> Tensor:
    """Inverted dropout: zero with probability ``p``, rescale survivors by 1/(1-p)."""
    x = as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ValidationError(f"dropout p must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValidationError("train-mode dropout needs a random generator")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return make_node(x.data * keep, "dropout", (x,), keep)


@register("dropout")
def _dropout_backward(keep, g):
    return (g * keep,)


# -- convolution -------------------------------------------------------------

def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> strided view (N, C, ho, wo, k, k)."""
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride][:, :, :ho, :wo]


def _scatter_windows(cols: np.ndarray, out_shape, k: int, stride: int) -> np.ndarray:
    """Adjoint of :func:`_windows`. cols is (N, ho, wo, C, k, k)."""
    out = np.zeros(out_shape, dtype=cols.dtype)
    ho, wo = cols.shape[1], cols.shape[2]
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return out


def _check_conv_args(x: Tensor, w: Tensor, cin_axis: int) -> int:
    if x.ndim != 4 or w.ndim != 4:
        raise ValidationError(f"conv expects 4-d input and weight, got {x.shape} and {w.shape}")
    if w.shape[2] != w.shape[3]:
        raise ValidationError("only square kernels are supported")
    if x.shape[1] != w.shape[cin_axis]:
        raise ValidationError(f"channel mismatch: input {x.shape[1]} vs weight {w.shape}")
    return w.shape[2]


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with weight (C_out, C_in, k, k)."""
    x, w = as_tensor(x), as_tensor(w)
    k = _check_conv_args(x, w, 1)
    n, _, h, wd = x.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ValidationError(f"input {x.shape} too small for kernel {k}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = _windows(xp, k, stride, ho, wo)
    out = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    inputs = (x, w)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data.reshape(1, -1, 1, 1)
        inputs = (x, w, b)
    ctx = (win, w.data, xp.shape, x.shape, stride, padding, k, b is not None)
    return make_node(np.ascontiguousarray(out), "conv2d", inputs, ctx)


@register("conv2d")
def _conv2d_backward(ctx, g):
    win, w, xp_shape, x_shape, stride, padding, k, has_bias = ctx
    dw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
    cols = np.tensordot(g, w, axes=([1], [0]))  # (N, ho, wo, C_in, k, k)
    dxp = _scatter_windows(cols, xp_shape, k, stride)
    h, wd = x_shape[2], x_shape[3]
    dx = dxp[:, :, padding:padding + h, padding:padding + wd]
    grads = [np.ascontiguousarray(dx), dw]
    if has_bias:
        grads.append(g.sum(axis=(0, 2, 3)))
    return grads


def conv_transpose2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution with weight (C_in, C_out, k, k).

    Output side is ``(H - 1) * stride - 2 * padding + k``.
    """
    x, w = as_tensor(x), as_tensor(w)
    k = _check_conv_args(x, w, 0)
    n, _, h, wd = x.shape
    hp, wp = (h - 1) * stride + k, (wd - 1) * stride + k
    ho, wo = hp - 2 * padding, wp - 2 * padding
    if ho < 1 or wo < 1:
        raise ValidationError("padding too large for transposed convolution")
    cols = np.tensordot(x.data, w.data, axes=([1], [0]))  # (N, H, W, C_out, k, k)
    full = _scatter_windows(cols, (n, w.shape[1], hp, wp), k, stride)
    out = full[:, :, padding:padding + ho, padding:padding + wo]
    inputs = (x, w)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data.reshape(1, -1, 1, 1)
        inputs = (x, w, b)
    ctx = (x.data, w.data, stride, padding, k, (h, wd), b is not None)
    return make_node(np.ascontiguousarray(out), "conv_transpose2d", inputs, ctx)


@register("conv_transpose2d")
def _conv_transpose2d_backward(ctx, g):
    x, w, stride, padding, k, (h, wd), has_bias = ctx
    gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = _windows(gp, k, stride, h, wd)  # (N, C_out, H, W, k, k)
    dx = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    dw = np.tensordot(x, win, axes=([0, 2, 3], [0, 2, 3]))
    grads = [np.ascontiguousarray(dx), dw]
    if has_bias:
        grads.append(g.sum(axis=(0, 2, 3)))
    return grads


# -- normalization -----------------------------------------------------------

def instance_norm(x, eps: float = 1e-5) -> Tensor:
    """Normalize each (sample, channel) plane to zero mean, unit variance."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ValidationError("instance_norm expects NCHW input")
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    var = x.data.var(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    return make_node(xhat, "instance_norm", (x,), (xhat, inv))


@register("instance_norm")
def _instance_norm_backward(ctx, g):
    xhat, inv = ctx
    gm = g.mean(axis=(2, 3), keepdims=True)
    gx = (g * xhat).mean(axis=(2, 3), keepdims=True)
    return (inv * (g - gm - xhat * gx),)


# -- losses ------------------------------------------------------------------

def bce_with_logits(logits, target) -> Tensor:
    """Mean binary cross-entropy on raw logits; ``target`` is held constant."""
    z = as_tensor(logits)
    t = np.broadcast_to(np.asarray(target.data if isinstance(target, Tensor) else target,
                                   dtype=z.dtype), z.shape)
    per = np.maximum(z.data, 0) - z.data * t + np.log1p(np.exp(-np.abs(z.data)))
    out = np.asarray(per.mean(), dtype=z.dtype)
    return make_node(out, "bce_with_logits", (z,), (z.data, t))


@register("bce_with_logits")
def _bce_backward(ctx, g):
    z, t = ctx
    return (g * (_stable_sigmoid(z) - t) / z.size,)


def l1_loss(a, b) -> Tensor:
    """Mean absolute difference."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValidationError(f"l1_loss shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    note_kink_input(diff)
    out = np.asarray(np.abs(diff).mean(), dtype=a.dtype)
    return make_node(out, "l1_loss", (a, b), (np.sign(diff), diff.size))


@register("l1_loss")
def _l1_backward(ctx, g):
    sign, n = ctx
    ga = g * sign / n
    return ga, -ga
