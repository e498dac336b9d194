"""Layer-level differentiable operations on NCHW tensors."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigError, ShapeError
from .tensor import Tensor, as_tensor, make_result, matmul, mul, swapaxes


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x`` (N, C, H, W) with ``kernel`` (O, C, K, K)."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError("conv2d expects NCHW input and OIKK kernel", x.shape, kernel.shape)
    n, c, h, w = x.shape
    o, ci, kh, kw = kernel.shape
    if ci != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernel expects {ci}",
                         x.shape, kernel.shape)
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride={stride} / padding={padding}", x.shape)
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d output would be empty", x.shape, kernel.shape)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # rows: (c, kh, kw); cols: (n, ho, wo); this gather keeps contiguous runs along wo
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)
    wmat = kernel.data.reshape(o, -1)
    out = wmat @ cols
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data[:, None]
    out = out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3)

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gk = (g2 @ cols.T).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ g2).reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        gcols[:, i, j].transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if bias is None:
            return gx, gk
        gb = g2.sum(axis=1) if bias.requires_grad else None
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_result(np.ascontiguousarray(out), parents, backward)


def _blocks(x: Tensor, factor: int, kind: str) -> np.ndarray:
    n, c, h, w = x.shape
    if h % factor or w % factor:
        raise ShapeError(f"{kind}: spatial extents must be divisible by {factor}", x.shape)
    return x.data.reshape(n, c, h // factor, factor, w // factor, factor)


def max_pool(x, factor: int = 2) -> Tensor:
    x = as_tensor(x)
    blocks = _blocks(x, factor, "max-pool")
    n, c, ho, _, wo, _ = blocks.shape
    flat = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, factor * factor)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        gx = gflat.reshape(n, c, ho, wo, factor, factor).transpose(0, 1, 2, 4, 3, 5)
        return (gx.reshape(x.shape),)

    return make_result(out, (x,), backward)


def avg_pool(x, factor: int = 2) -> Tensor:
    x = as_tensor(x)
    blocks = _blocks(x, factor, "average-pool")
    out = blocks.mean(axis=(3, 5))
    scale = 1.0 / (factor * factor)

    def backward(g):
        gx = np.repeat(np.repeat(g * scale, factor, axis=2), factor, axis=3)
        return (gx,)

    return make_result(out, (x,), backward)


def upsample_nearest(x, factor: int = 2) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("upsample expects NCHW", x.shape)
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)
    n, c, h, w = x.shape

    def backward(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return make_result(out, (x,), backward)


def pool_and_resize(kind: str, x, factor: int) -> Tensor:
    ops = {"max-pool": max_pool, "average-pool": avg_pool, "nearest-upsample": upsample_nearest}
    if kind not in ops:
        raise ConfigError(f"unknown resize kind {kind!r}; expected one of {sorted(ops)}")
    return ops[kind](x, factor)


def group_norm(x, groups: int, scale, shift, eps: float = 1e-5) -> Tensor:
    """Normalize each group of channels to zero mean / unit variance, then affine."""
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    n, c = x.shape[:2]
    if groups < 1 or c % groups:
        raise ConfigError(f"group_norm: {c} channels not divisible into {groups} groups")
    if eps <= 0:
        raise ConfigError("group_norm: eps must be positive")
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError("group_norm: scale/shift must have one entry per channel",
                         scale.shape, shift.shape)
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    centered = xg - mu
    var = (centered**2).mean(axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (centered * inv_std).reshape(x.shape)
    bshape = (1, c) + (1,) * (x.ndim - 2)
    out = xhat * scale.data.reshape(bshape) + shift.data.reshape(bshape)
    red_axes = (0,) + tuple(range(2, x.ndim))

    def backward(g):
        gscale = (g * xhat).sum(axis=red_axes) if scale.requires_grad else None
        gshift = g.sum(axis=red_axes) if shift.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = (g * scale.data.reshape(bshape)).reshape(n, groups, -1)
            xh = xhat.reshape(n, groups, -1)
            gx = inv_std * (gxhat - gxhat.mean(axis=2, keepdims=True)
                            - xh * (gxhat * xh).mean(axis=2, keepdims=True))
            gx = gx.reshape(x.shape)
        return gx, gscale, gshift

    return make_result(out, (x, scale, shift), backward)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), backward)


def softmax_channel(x) -> Tensor:
    """Per-pixel softmax over the channel axis of an NCHW tensor."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[1] < 1:
        raise ShapeError("softmax_channel expects NCHW with C >= 1", x.shape)
    return softmax(x, axis=1)


def matmul_attention(q, k, v) -> Tensor:
    """Scaled dot-product attention; q, k: (..., L, d), v: (..., L, dv)."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2] or q.shape[:-2] != k.shape[:-2]:
        raise ShapeError("attention operands disagree", q.shape, k.shape, v.shape)
    scores = mul(matmul(q, swapaxes(k, -1, -2)), 1.0 / math.sqrt(q.shape[-1]))
    return matmul(softmax(scores, axis=-1), v)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` with weight shaped (out, in)."""
    out = matmul(x, swapaxes(as_tensor(weight), 0, 1))
    return out if bias is None else out + bias
