"""Convolution-family primitives on NCHW tensors.

All convolutions are cross-correlations (no kernel flip).  Each op carries its
own backward rule so it can be gradient-checked as a single primitive.
"""
from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return v, v
    return int(v[0]), int(v[1])


def _tap(xp: np.ndarray, i: int, j: int, Ho: int, Wo: int, sh: int, sw: int) -> np.ndarray:
    """Input samples seen by kernel tap (i, j) at every output position: (B, C, Ho, Wo) view."""
    return xp[:, :, i:i + sh * (Ho - 1) + 1:sh, j:j + sw * (Wo - 1) + 1:sw]


def _pad(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _unpad(gxp: np.ndarray, ph: int, pw: int) -> np.ndarray:
    H, W = gxp.shape[2] - 2 * ph, gxp.shape[3] - 2 * pw
    return gxp[:, :, ph:ph + H, pw:pw + W]


# Convolutions loop over the kh*kw kernel taps and accumulate shifted slices,
# so peak memory stays at a few activation-sized buffers instead of an
# im2col copy kh*kw times larger.


def _out_size(n: int, k: int, s: int, p: int, op: str) -> int:
    if n + 2 * p < k:
        raise ShapeError(f"{op}: kernel extent {k} larger than padded input extent {n + 2 * p}")
    return (n + 2 * p - k) // s + 1


def conv2d(x, weight, bias=None, stride=1, padding=0) -> Tensor:
    """Dense 2-D convolution.  x: (B, Ci, H, W); weight: (Co, Ci, kh, kw)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {weight.shape}")
    (sh, sw), (ph, pw) = _pair(stride), _pair(padding)
    kh, kw = weight.shape[2:]
    Ho = _out_size(x.shape[2], kh, sh, ph, "conv2d")
    Wo = _out_size(x.shape[3], kw, sw, pw, "conv2d")
    xp = _pad(x.data, ph, pw)
    out = 0.0
    for i in range(kh):
        for j in range(kw):
            out = out + np.einsum("bchw,oc->bohw", _tap(xp, i, j, Ho, Wo, sh, sw), weight.data[:, :, i, j],
                                  optimize=True)
    parents = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"conv2d: bias {bias.shape} does not match {weight.shape[0]} output channels")
        out = out + bias.data[None, :, None, None]
        parents = parents + (bias,)

    def bw(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        gw = np.empty_like(weight.data)
        for i in range(kh):
            for j in range(kw):
                gw[:, :, i, j] = np.einsum("bohw,bchw->oc", g, _tap(xp, i, j, Ho, Wo, sh, sw), optimize=True)
                _tap(gxp, i, j, Ho, Wo, sh, sw)[...] += np.einsum("bohw,oc->bchw", g, weight.data[:, :, i, j],
                                                                 optimize=True)
        grads = [_unpad(gxp, ph, pw), gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return Tensor._result("conv2d", out, parents, bw)


def depthwise_conv2d(x, weight, bias=None, padding=0) -> Tensor:
    """Per-channel spatial convolution with unit stride.

    x: (B, C, H, W); weight: (C * m, kh, kw).  Output channel ``o`` filters input
    channel ``o // m`` only, so ``m = 1`` keeps the channel count.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 3 or weight.shape[0] % x.shape[1]:
        raise ShapeError(f"depthwise_conv2d: input {x.shape} incompatible with kernel {weight.shape}")
    mult = weight.shape[0] // x.shape[1]
    ph, pw = _pair(padding)
    kh, kw = weight.shape[1:]
    Ho = _out_size(x.shape[2], kh, 1, ph, "depthwise_conv2d")
    Wo = _out_size(x.shape[3], kw, 1, pw, "depthwise_conv2d")
    xr = np.repeat(x.data, mult, axis=1) if mult > 1 else x.data
    xp = _pad(xr, ph, pw)
    out = np.zeros((x.shape[0], weight.shape[0], Ho, Wo), dtype=np.result_type(xp, weight.data))
    for i in range(kh):
        for j in range(kw):
            out += _tap(xp, i, j, Ho, Wo, 1, 1) * weight.data[None, :, i, j, None, None]
    parents = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"depthwise_conv2d: bias {bias.shape} does not match {weight.shape[0]} channels")
        out = out + bias.data[None, :, None, None]
        parents = parents + (bias,)

    def bw(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        gw = np.empty_like(weight.data)
        for i in range(kh):
            for j in range(kw):
                gw[:, i, j] = np.einsum("bchw,bchw->c", g, _tap(xp, i, j, Ho, Wo, 1, 1), optimize=True)
                _tap(gxp, i, j, Ho, Wo, 1, 1)[...] += g * weight.data[None, :, i, j, None, None]
        gx = _unpad(gxp, ph, pw)
        if mult > 1:
            B, _, H, W = gx.shape
            gx = gx.reshape(B, x.shape[1], mult, H, W).sum(axis=2)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return Tensor._result("depthwise_conv2d", out, parents, bw)


def pointwise_conv2d(x, weight, bias=None) -> Tensor:
    """1x1 convolution mixing channels.  weight: (Co, Ci)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise ShapeError(f"pointwise_conv2d: input {x.shape} incompatible with kernel {weight.shape}")
    out = np.einsum("bchw,oc->bohw", x.data, weight.data, optimize=True)
    parents = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"pointwise_conv2d: bias {bias.shape} does not match {weight.shape[0]} channels")
        out = out + bias.data[None, :, None, None]
        parents = parents + (bias,)

    def bw(g):
        grads = [
            np.einsum("bohw,oc->bchw", g, weight.data, optimize=True),
            np.einsum("bohw,bchw->oc", g, x.data, optimize=True),
        ]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return Tensor._result("pointwise_conv2d", out, parents, bw)


def conv_transpose2d(x, weight, bias=None, stride=1, padding=0) -> Tensor:
    """Transposed convolution (adjoint of :func:`conv2d` in its input).

    x: (B, Ci, H, W); weight: (Ci, Co, kh, kw).  Output extent per axis is
    ``(n - 1) * s - 2 * p + k``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"conv_transpose2d: input {x.shape} incompatible with kernel {weight.shape}")
    (sh, sw), (ph, pw) = _pair(stride), _pair(padding)
    B, _, H, W = x.shape
    kh, kw = weight.shape[2:]
    Hf, Wf = (H - 1) * sh + kh, (W - 1) * sw + kw
    Ho, Wo = Hf - 2 * ph, Wf - 2 * pw
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"conv_transpose2d: padding {(ph, pw)} leaves no output for input {x.shape}")
    full = np.zeros((B, weight.shape[1], Hf, Wf), dtype=np.result_type(x.data, weight.data))
    for i in range(kh):
        for j in range(kw):
            full[:, :, i:i + sh * (H - 1) + 1:sh, j:j + sw * (W - 1) + 1:sw] += np.einsum(
                "bchw,co->bohw", x.data, weight.data[:, :, i, j], optimize=True
            )
    out = full[:, :, ph:ph + Ho, pw:pw + Wo]
    parents = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"conv_transpose2d: bias {bias.shape} does not match {weight.shape[1]} channels")
        out = out + bias.data[None, :, None, None]
        parents = parents + (bias,)

    def bw(g):
        gfull = np.zeros(full.shape, dtype=g.dtype)
        gfull[:, :, ph:ph + Ho, pw:pw + Wo] = g
        gx = np.zeros_like(x.data)
        gw = np.zeros_like(weight.data)
        for i in range(kh):
            for j in range(kw):
                gs = gfull[:, :, i:i + sh * (H - 1) + 1:sh, j:j + sw * (W - 1) + 1:sw]
                gx += np.einsum("bohw,co->bchw", gs, weight.data[:, :, i, j], optimize=True)
                gw[:, :, i, j] = np.einsum("bchw,bohw->co", x.data, gs, optimize=True)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return Tensor._result("conv_transpose2d", out, parents, bw)


def max_pool2d(x, pool) -> Tensor:
    """Non-overlapping max pooling; spatial dims must divide the pool extents."""
    x = as_tensor(x)
    ph, pw = _pair(pool)
    B, C, H, W = x.shape
    if H % ph or W % pw:
        raise ShapeError(f"max_pool2d: spatial dims {(H, W)} not divisible by pool {(ph, pw)}")
    win = x.data.reshape(B, C, H // ph, ph, W // pw, pw).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(B, C, H // ph, W // pw, ph * pw)
    arg = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gwin = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gwin, arg[..., None], g[..., None], axis=-1)
        gwin = gwin.reshape(B, C, H // ph, W // pw, ph, pw).transpose(0, 1, 2, 4, 3, 5)
        return (gwin.reshape(B, C, H, W),)

    return Tensor._result("max_pool2d", out, (x,), bw)
