"""Differentiable operations on :class:`~sfgnet.autograd.tensor.Tensor`.

Convolutions use cross-correlation (no kernel flip) over NCHW layouts with
zero padding. Each op computes its forward result with numpy and hands a
closure computing the vector-Jacobian product to :func:`make_result`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, make_result

BN_EPS = 1e-5


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_result("add", a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_result("sub", a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result("mul", ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd

    def bw(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result("div", out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return make_result("neg", -a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    e = float(exponent)
    return make_result("power", ad ** e, (a,), lambda g: (g * e * ad ** (e - 1.0),))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return make_result("square", ad * ad, (a,), lambda g: (2.0 * g * ad,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return make_result("log", out, (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def bw(g):
        # subgradient 0 at the kink so sqrt(0) stays usable inside losses
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)

    return make_result("sqrt", out, (a,), bw)


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    ad = a.data
    return make_result("abs", np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def softplus(a: Tensor) -> Tensor:
    ad = a.data
    out = np.logaddexp(0.0, ad)

    def bw(g):
        return (g * _sigmoid(ad),)

    return make_result("softplus", out, (a,), bw)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return make_result("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    ad = a.data
    mask = ad > 0
    return make_result("relu", np.where(mask, ad, 0.0), (a,), lambda g: (g * mask,))


def _channel_view(a: np.ndarray, x_ndim: int) -> np.ndarray:
    # per-channel parameters broadcast along axis 1 (axis 0 for 1-D inputs)
    if a.size == 1:
        return a.reshape(())
    if x_ndim == 1:
        return a.reshape(-1)
    return a.reshape((1, -1) + (1,) * (x_ndim - 2))


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """``x`` where positive, ``slope * x`` elsewhere; one slope per channel."""
    x, slope = as_tensor(x), as_tensor(slope)
    xd = x.data
    if slope.size != 1:
        channels = xd.shape[0] if xd.ndim == 1 else xd.shape[1]
        if slope.size != channels:
            raise ValueError(f"prelu: slope shape {slope.shape} does not match "
                             f"channel count of input shape {x.shape}")
    a = _channel_view(slope.data, xd.ndim)
    pos = xd > 0
    out = np.where(pos, xd, a * xd)

    def bw(g):
        gx = g * np.where(pos, 1.0, a)
        ga = None
        if slope.requires_grad:
            ga = _unbroadcast(np.where(pos, 0.0, g * xd), np.shape(a)).reshape(slope.shape)
        return gx, ga

    return make_result("prelu", out, (x, slope), bw)


# ---------------------------------------------------------------------------
# shape manipulation and reductions
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return make_result("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,),
                       lambda g: (g.transpose(inv),))


def getitem(a: Tensor, index) -> Tensor:
    src_shape = a.shape
    out = np.array(a.data[index], dtype=np.float64)

    def bw(g):
        full = np.zeros(src_shape)
        np.add.at(full, index, g)
        return (full,)

    return make_result("getitem", out, (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ValueError(f"concat: incompatible shapes {ref} and {t.shape} along axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return make_result("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, bw)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src),)

    return make_result("sum", np.asarray(out, dtype=np.float64), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([src[i] for i in axes]))
    out = np.mean(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, src),)

    return make_result("mean", np.asarray(out, dtype=np.float64), (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)

    return make_result("matmul", ad @ bd, (a, b), bw)


def mask_channels(x: Tensor, weights) -> Tensor:
    """Scale channel ``k`` (axis 1) of ``x`` by ``weights[k]``.

    With a 0/1 ``weights`` vector this zeroes whole channels.
    """
    weights = as_tensor(weights)
    if weights.ndim != 1 or weights.shape[0] != x.shape[1]:
        raise ValueError(f"mask_channels: weights shape {weights.shape} does not match "
                         f"channels of input shape {x.shape}")
    return mul(x, reshape(weights, (1, -1) + (1,) * (x.ndim - 2)))


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result("softmax", out, (a,), bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result("log_softmax", out, (a,), bw)


def pick(a: Tensor, index: np.ndarray, axis: int = 1) -> Tensor:
    """Select ``a[..., index, ...]`` along ``axis`` (one entry per position)."""
    index = np.asarray(index)
    idx = np.expand_dims(index.astype(np.intp), axis)
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)
    src = a.shape

    def bw(g):
        full = np.zeros(src)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return make_result("pick", out, (a,), bw)


def straight_through(hard: np.ndarray, soft: Tensor) -> Tensor:
    """Forward value ``hard``; gradient passes unchanged to ``soft``."""
    hard = np.asarray(hard, dtype=np.float64)
    if hard.shape != soft.shape:
        raise ValueError(f"straight_through: shapes {hard.shape} and {soft.shape} differ")
    return make_result("straight_through", hard.copy(), (soft,), lambda g: (g,))


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x`` [B, Cin, H, W] with ``kernels`` [Cout, Cin, kh, kw]."""
    x, kernels = as_tensor(x), as_tensor(kernels)
    if x.ndim != 4 or kernels.ndim != 4 or x.shape[1] != kernels.shape[1]:
        raise ValueError(f"conv2d: input shape {x.shape} incompatible with kernel shape {kernels.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: bad stride={stride} / padding={padding}")
    B, C, H, W = x.shape
    O, _, kh, kw = kernels.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    Hp, Wp = xp.shape[2], xp.shape[3]
    if Hp < kh or Wp < kw:
        raise ValueError(f"conv2d: kernel {kernels.shape} larger than padded input {xp.shape}")
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: [B, C, Ho, Wo, kh, kw]
    kd = kernels.data
    out = np.tensordot(win, kd, axes=([1, 4, 5], [1, 2, 3]))  # [B, Ho, Wo, O]
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def bw(g):
        gk = None
        gx = None
        if kernels.requires_grad:
            gk = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # [O, C, kh, kw]
        if x.requires_grad:
            cols = np.tensordot(g, kd, axes=([1], [0]))  # [B, Ho, Wo, C, kh, kw]
            gxp = np.zeros((B, C, Hp, Wp))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                        cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        return gx, gk

    return make_result("conv2d", out, (x, kernels), bw)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling (window = stride = ``size``); trailing rows/cols are dropped."""
    if x.ndim != 4:
        raise ValueError(f"max_pool2d: expected a 4-D input, got shape {x.shape}")
    B, C, H, W = x.shape
    Ho, Wo = H // size, W // size
    if Ho == 0 or Wo == 0:
        raise ValueError(f"max_pool2d: window {size} larger than input shape {x.shape}")
    crop = x.data[:, :, :Ho * size, :Wo * size]
    blocks = crop.reshape(B, C, Ho, size, Wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, size * size)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(B, C, Ho, Wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho * size, Wo * size)
        if Ho * size == H and Wo * size == W:
            return (gb,)
        full = np.zeros((B, C, H, W))
        full[:, :, :Ho * size, :Wo * size] = gb
        return (full,)

    return make_result("max_pool2d", np.ascontiguousarray(out), (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool: expected a 4-D input, got shape {x.shape}")
    return mean(x, axis=(2, 3))


# ---------------------------------------------------------------------------
# batch normalisation
# ---------------------------------------------------------------------------

@dataclass
class RunningStats:
    """Running mean/variance; tracked for inspection, never used to normalise."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1
    count: int = field(default=0)

    @classmethod
    def zeros(cls, channels: int) -> "RunningStats":
        return cls(np.zeros(channels), np.ones(channels))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, mode: str = "train",
               running: Optional[RunningStats] = None, eps: float = BN_EPS) -> Tensor:
    """Per-channel normalisation with current-batch statistics in both modes.

    ``mode`` only decides whether ``running`` is updated (``"train"``).
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"batch_norm: mode must be 'train' or 'eval', got {mode!r}")
    if x.ndim not in (2, 4):
        raise ValueError(f"batch_norm: expected 2-D or 4-D input, got shape {x.shape}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    n = int(np.prod([x.shape[a] for a in axes]))
    if n < 2:
        raise ValueError(f"batch_norm: cannot estimate variance from one value per channel "
                         f"(input shape {x.shape})")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(f"batch_norm: gamma {gamma.shape} / beta {beta.shape} do not match {C} channels")
    bshape = (1, C) + (1,) * (x.ndim - 2)
    xd = x.data
    mu = xd.mean(axis=axes, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    gd = gamma.data.reshape(bshape)
    out = gd * xhat + beta.data.reshape(bshape)
    if running is not None and mode == "train":
        m = running.momentum
        running.mean = (1 - m) * running.mean + m * mu.reshape(C)
        running.var = (1 - m) * running.var + m * var.reshape(C) * n / (n - 1)
        running.count += 1

    def bw(g):
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gd
            gx = (inv / n) * (n * dxhat - dxhat.sum(axis=axes, keepdims=True)
                              - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        return gx, ggamma, gbeta

    return make_result("batch_norm", out, (x, gamma, beta), bw)


def zeros_like(x: Tensor) -> Tensor:
    return Tensor(np.zeros(x.shape))
