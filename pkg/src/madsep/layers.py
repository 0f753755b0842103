"""Neural building blocks: linear, GRU, convolutions, batch norm, pooling,
dropout and the depthwise-separable (DWS) block.

Layers are plain functions over a flat ``params`` mapping of name -> Tensor,
with a ``prefix`` selecting the layer's entries.  ``init_*`` helpers create
those entries; ``count_*`` helpers return the trainable scalar count without
allocating anything.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import MutableMapping

import numpy as np

from . import conv
from . import tensor as tn
from .tensor import ShapeError, Tensor

Params = MutableMapping[str, Tensor]
Buffers = MutableMapping[str, np.ndarray]

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _uniform(rng: np.random.Generator, bound: float, shape, dtype) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=dtype)


# -- activations ---------------------------------------------------------
def relu(x: Tensor) -> Tensor:
    return tn.relu(x)


def lrelu(x: Tensor, beta: float = 1e-2) -> Tensor:
    return tn.lrelu(x, beta)


# -- linear --------------------------------------------------------------
def init_linear(params: Params, prefix: str, d_in: int, d_out: int, rng, dtype=np.float64) -> None:
    bound = 1.0 / np.sqrt(d_in)
    params[f"{prefix}.weight"] = _uniform(rng, bound, (d_out, d_in), dtype)
    params[f"{prefix}.bias"] = _uniform(rng, bound, (d_out,), dtype)


def count_linear(d_in: int, d_out: int) -> int:
    return d_in * d_out + d_out


def linear(x: Tensor, params: Params, prefix: str) -> Tensor:
    """``y = x W^T + b`` on the last axis; leading axes (batch, time) are shared."""
    w, b = params[f"{prefix}.weight"], params[f"{prefix}.bias"]
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear {prefix}: input width {x.shape[-1]} != weight in-features {w.shape[1]}")
    return x @ w.T + b


# -- GRU -----------------------------------------------------------------
def init_gru(params: Params, prefix: str, d_in: int, hidden: int, rng, dtype=np.float64) -> None:
    bound = 1.0 / np.sqrt(hidden)
    params[f"{prefix}.weight_ih"] = _uniform(rng, bound, (3 * hidden, d_in), dtype)
    params[f"{prefix}.weight_hh"] = _uniform(rng, bound, (3 * hidden, hidden), dtype)
    params[f"{prefix}.bias_ih"] = _uniform(rng, bound, (3 * hidden,), dtype)
    params[f"{prefix}.bias_hh"] = _uniform(rng, bound, (3 * hidden,), dtype)


def count_gru(d_in: int, hidden: int) -> int:
    return 3 * d_in * hidden + 3 * hidden * hidden + 6 * hidden


def _gru_update(gi: Tensor, h: Tensor, params: Params, prefix: str) -> Tensor:
    # gi already holds W_ih x + b_ih, gates ordered (r, z, n)
    w_hh, b_hh = params[f"{prefix}.weight_hh"], params[f"{prefix}.bias_hh"]
    H = w_hh.shape[1]
    gh = h @ w_hh.T + b_hh
    r = tn.sigmoid(gi[..., :H] + gh[..., :H])
    z = tn.sigmoid(gi[..., H:2 * H] + gh[..., H:2 * H])
    n = tn.tanh(gi[..., 2 * H:] + r * gh[..., 2 * H:])
    return (1.0 - z) * n + z * h


def gru_cell(x: Tensor, h_prev: Tensor, params: Params, prefix: str) -> Tensor:
    """One GRU step.  x: (..., I); h_prev: (..., H)."""
    w_ih = params[f"{prefix}.weight_ih"]
    if x.shape[-1] != w_ih.shape[1] or h_prev.shape[-1] != w_ih.shape[0] // 3:
        raise ShapeError(
            f"gru_cell {prefix}: input {x.shape} / state {h_prev.shape} vs weight_ih {w_ih.shape}"
        )
    if x.ndim == 1:
        h = gru_cell(x.reshape(1, -1), h_prev.reshape(1, -1), params, prefix)
        return h.reshape(-1)
    gi = x @ w_ih.T + params[f"{prefix}.bias_ih"]
    return _gru_update(gi, h_prev, params, prefix)


def gru_sequence(x: Tensor, params: Params, prefix: str) -> Tensor:
    """Run a GRU over (B, S, I) from a zero state; returns all states (B, S, H)."""
    w_ih = params[f"{prefix}.weight_ih"]
    if x.ndim != 3 or x.shape[-1] != w_ih.shape[1]:
        raise ShapeError(f"gru {prefix}: expected (B, S, {w_ih.shape[1]}), got {x.shape}")
    H = w_ih.shape[0] // 3
    gi_all = x @ w_ih.T + params[f"{prefix}.bias_ih"]
    h = Tensor(np.zeros((x.shape[0], H), dtype=x.dtype))
    states = []
    for t in range(x.shape[1]):
        h = _gru_update(gi_all[:, t], h, params, prefix)
        states.append(h)
    return tn.stack(states, axis=1)


# -- convolutions --------------------------------------------------------
def init_depthwise(params: Params, prefix: str, c_in: int, kh: int, kw: int, rng,
                   multiplier: int = 1, dtype=np.float64) -> None:
    bound = 1.0 / np.sqrt(kh * kw)
    params[f"{prefix}.weight"] = _uniform(rng, bound, (c_in * multiplier, kh, kw), dtype)
    params[f"{prefix}.bias"] = _uniform(rng, bound, (c_in * multiplier,), dtype)


def depthwise_conv(x: Tensor, params: Params, prefix: str, padding=0) -> Tensor:
    return conv.depthwise_conv2d(x, params[f"{prefix}.weight"], params[f"{prefix}.bias"], padding=padding)


def init_pointwise(params: Params, prefix: str, c_in: int, c_out: int, rng, dtype=np.float64) -> None:
    bound = 1.0 / np.sqrt(c_in)
    params[f"{prefix}.weight"] = _uniform(rng, bound, (c_out, c_in), dtype)
    params[f"{prefix}.bias"] = _uniform(rng, bound, (c_out,), dtype)


def pointwise_conv(x: Tensor, params: Params, prefix: str) -> Tensor:
    return conv.pointwise_conv2d(x, params[f"{prefix}.weight"], params[f"{prefix}.bias"])


def init_conv(params: Params, prefix: str, c_in: int, c_out: int, kh: int, kw: int, rng,
              bias: bool = True, dtype=np.float64) -> None:
    bound = 1.0 / np.sqrt(c_in * kh * kw)
    params[f"{prefix}.weight"] = _uniform(rng, bound, (c_out, c_in, kh, kw), dtype)
    if bias:
        params[f"{prefix}.bias"] = _uniform(rng, bound, (c_out,), dtype)


def conv2d(x: Tensor, params: Params, prefix: str, stride=1, padding=0) -> Tensor:
    return conv.conv2d(x, params[f"{prefix}.weight"], params.get(f"{prefix}.bias"), stride, padding)


def init_transposed_conv(params: Params, prefix: str, c_in: int, c_out: int, kh: int, kw: int, rng,
                         bias: bool = True, dtype=np.float64) -> None:
    bound = 1.0 / np.sqrt(c_out * kh * kw)
    params[f"{prefix}.weight"] = _uniform(rng, bound, (c_in, c_out, kh, kw), dtype)
    if bias:
        params[f"{prefix}.bias"] = _uniform(rng, bound, (c_out,), dtype)


def transposed_conv(x: Tensor, params: Params, prefix: str, stride=1, padding=0) -> Tensor:
    return conv.conv_transpose2d(x, params[f"{prefix}.weight"], params.get(f"{prefix}.bias"), stride, padding)


def max_pool(x: Tensor, pool_h: int, pool_w: int) -> Tensor:
    return conv.max_pool2d(x, (pool_h, pool_w))


# -- batch norm ----------------------------------------------------------
def init_batch_norm(params: Params, buffers: Buffers, prefix: str, channels: int, dtype=np.float64) -> None:
    params[f"{prefix}.gamma"] = Tensor(np.ones(channels), requires_grad=True, dtype=dtype)
    params[f"{prefix}.beta"] = Tensor(np.zeros(channels), requires_grad=True, dtype=dtype)
    buffers[f"{prefix}.running_mean"] = np.zeros(channels, dtype=dtype)
    buffers[f"{prefix}.running_var"] = np.ones(channels, dtype=dtype)


def batch_norm(x: Tensor, params: Params, buffers: Buffers, prefix: str, mode: str = "train") -> Tensor:
    """Per-channel normalisation over batch and spatial axes of (B, C, H, W).

    Train mode uses batch statistics and updates the running estimates in
    ``buffers`` (unbiased variance, momentum 0.1); eval mode uses them.
    """
    gamma, beta = params[f"{prefix}.gamma"], params[f"{prefix}.beta"]
    C = gamma.shape[0]
    if x.ndim != 4 or x.shape[1] != C:
        raise ShapeError(f"batch_norm {prefix}: expected (B, {C}, H, W), got {x.shape}")
    shape = (1, C, 1, 1)
    if mode == "train":
        n = x.shape[0] * x.shape[2] * x.shape[3]
        if n < 2:
            raise ValueError(f"batch_norm {prefix}: need at least 2 values per channel in train mode, got {n}")
        mu = tn.mean(x, axis=(0, 2, 3), keepdims=True)
        centred = x - mu
        var = tn.mean(tn.square(centred), axis=(0, 2, 3), keepdims=True)
        xhat = centred / tn.sqrt(var + BN_EPS)
        rm, rv = f"{prefix}.running_mean", f"{prefix}.running_var"
        buffers[rm] = (1 - BN_MOMENTUM) * buffers[rm] + BN_MOMENTUM * mu.data.reshape(C)
        buffers[rv] = (1 - BN_MOMENTUM) * buffers[rv] + BN_MOMENTUM * var.data.reshape(C) * n / (n - 1)
    elif mode == "eval":
        mu = buffers[f"{prefix}.running_mean"].reshape(shape)
        var = buffers[f"{prefix}.running_var"].reshape(shape)
        xhat = (x - mu) / np.sqrt(var + BN_EPS)
    else:
        raise ValueError(f"batch_norm: unknown mode {mode!r}")
    return xhat * gamma.reshape(shape) + beta.reshape(shape)


# -- dropout -------------------------------------------------------------
def dropout(x: Tensor, p: float, mode: str, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: zero with probability ``p`` and rescale survivors by ``1/(1-p)``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: p must lie in [0, 1), got {p}")
    if mode != "train" or p == 0.0:
        return x
    keep = rng.random(x.shape) >= p
    return x * (keep / (1.0 - p)).astype(x.dtype)


# -- DWS block -----------------------------------------------------------
@dataclass(frozen=True)
class DwsBlockConfig:
    c_in: int
    c_out: int
    k_h: int = 5
    k_w: int = 5
    beta: float = 1e-2
    same_pad: bool = True
    # depthwise channel multiplier; output of the depthwise stage has c_in * multiplier channels
    multiplier: int = 1

    def __post_init__(self):
        if self.c_in < 1 or self.c_out < 1 or self.multiplier < 1:
            raise ValueError(f"DwsBlockConfig: channel counts must be >= 1, got {self}")
        if self.same_pad and (self.k_h % 2 == 0 or self.k_w % 2 == 0):
            raise ValueError(f"DwsBlockConfig: same padding needs odd kernels, got {self.k_h}x{self.k_w}")
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"DwsBlockConfig: beta must lie in (0, 1), got {self.beta}")

    @property
    def mid_channels(self) -> int:
        return self.c_in * self.multiplier

    @property
    def padding(self) -> tuple[int, int]:
        return (self.k_h // 2, self.k_w // 2) if self.same_pad else (0, 0)


def init_dws_block(params: Params, buffers: Buffers, prefix: str, cfg: DwsBlockConfig, rng,
                   dtype=np.float64) -> None:
    init_depthwise(params, f"{prefix}.depthwise", cfg.c_in, cfg.k_h, cfg.k_w, rng, cfg.multiplier, dtype)
    init_batch_norm(params, buffers, f"{prefix}.bn", cfg.mid_channels, dtype)
    init_pointwise(params, f"{prefix}.pointwise", cfg.mid_channels, cfg.c_out, rng, dtype)


def count_dws_block(cfg: DwsBlockConfig) -> int:
    mid = cfg.mid_channels
    return mid * cfg.k_h * cfg.k_w + mid + 2 * mid + count_linear(mid, cfg.c_out)


def dws_block(x: Tensor, cfg: DwsBlockConfig, params: Params, buffers: Buffers, prefix: str,
              mode: str = "train") -> Tensor:
    """ReLU(pointwise(BN(LReLU(depthwise(x))))) on (B, C_in, H, W)."""
    if x.ndim != 4 or x.shape[1] != cfg.c_in:
        raise ShapeError(f"dws_block {prefix}: expected (B, {cfg.c_in}, H, W), got {x.shape}")
    d = depthwise_conv(x, params, f"{prefix}.depthwise", padding=cfg.padding)
    d = lrelu(d, cfg.beta)
    d = batch_norm(d, params, buffers, f"{prefix}.bn", mode)
    return relu(pointwise_conv(d, params, f"{prefix}.pointwise"))
