"""Masker (recurrent or DWS-CNN) and denoiser assembly, forward passes and
exact parameter counting."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import layers as nn
from . import tensor as tn
from .layers import DwsBlockConfig
from .tensor import ShapeError, Tensor

VARIANTS = ("rnn", "dws-cnn")
L_ENC_GRID = (5, 7, 9, 11, 13, 15)
C_O_GRID = (64, 128, 256)

# published totals (masker + denoiser) per (L_enc, C_o) and the recurrent baseline
REFERENCE_TOTALS = {
    (5, 64): 4_783_426, (5, 128): 4_922_754, (5, 256): 5_447_170,
    (7, 64): 4_795_586, (7, 128): 4_963_458, (7, 256): 5_594_114,
    (9, 64): 4_807_746, (9, 128): 5_004_162, (9, 256): 5_741_058,
    (11, 64): 4_819_906, (11, 128): 5_044_866, (11, 256): 5_888_002,
    (13, 64): 4_832_066, (13, 128): 5_085_570, (13, 256): 6_034_946,
    (15, 64): 4_844_226, (15, 128): 5_126_274, (15, 256): 6_181_890,
}
RNN_MASKER_PARAMS = 22_996_113
DENOISER_PARAMS = 4_199_425


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MaskerConfig:
    variant: str = "rnn"
    F: int = 2049
    N_tr: int = 744
    T: int = 60
    L: int = 10
    L_enc: int = 7
    C_o: int = 256
    p_enc: float = 0.25
    p_dec: float = 0.25
    pool_enc: tuple[int, int] = (1, 2)
    pool_dec: tuple[int, int] = (1, 8)
    kernel: int = 5
    beta: float = 1e-2
    precision: str = "f64"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not 1 <= self.N_tr <= self.F:
            raise ConfigError(f"N_tr={self.N_tr} must lie in [1, F={self.F}]")
        if self.T < 1:
            raise ConfigError(f"T must be positive, got {self.T}")
        if self.L < 0 or self.L % 2:
            raise ConfigError(f"L must be a non-negative even number, got {self.L}")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")
        if self.variant == "dws-cnn":
            if self.L_enc < 1 or self.C_o < 1:
                raise ConfigError(f"L_enc and C_o must be >= 1, got {self.L_enc}, {self.C_o}")
            for name in ("p_enc", "p_dec"):
                if not 0.0 <= getattr(self, name) < 1.0:
                    raise ConfigError(f"{name} must lie in [0, 1)")
            if self.pool_enc[0] != 1 or self.pool_dec[0] != 1:
                raise ConfigError("pooling must leave the time axis untouched (pool_h == 1)")
            if self.cropped_bins % self.pool_dec[1]:
                raise ConfigError(
                    f"decoder pool width {self.pool_dec[1]} does not divide {self.cropped_bins} bins; "
                    "cannot restore the mask to F bands"
                )
            if self.kernel % 2 == 0:
                raise ConfigError(f"kernel must be odd for same padding, got {self.kernel}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    @property
    def half(self) -> int:
        return self.L // 2

    @property
    def cropped_bins(self) -> int:
        """Bands fed to the CNN stack: F rounded down to a multiple of the encoder pool."""
        return (self.F // self.pool_enc[1]) * self.pool_enc[1]

    @property
    def fnn_in(self) -> int:
        """Width entering the masker's output linear layer."""
        if self.variant == "rnn":
            return 2 * self.N_tr
        return self.cropped_bins // self.pool_dec[1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pool_enc"] = list(self.pool_enc)
        d["pool_dec"] = list(self.pool_dec)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MaskerConfig":
        d = dict(d)
        for k in ("pool_enc", "pool_dec"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def replace(self, **kw) -> "MaskerConfig":
        return replace(self, **kw)


TINY = MaskerConfig(variant="dws-cnn", F=16, N_tr=8, T=4, L=2, L_enc=1, C_o=4, pool_dec=(1, 2))


@dataclass
class ModelParams:
    """Flat named parameter store (``masker.*`` and ``denoiser.*``) plus BN buffers."""

    config: MaskerConfig
    params: dict[str, Tensor] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def masker(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith("masker.")}

    @property
    def denoiser(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith("denoiser.")}

    @property
    def fnn_m_weight(self) -> Tensor:
        return self.params["masker.fnn_m.weight"]

    @property
    def fnn_d2_weight(self) -> Tensor:
        return self.params["denoiser.fnn_d2.weight"]

    def n_trainable(self) -> int:
        return sum(p.size for p in self.params.values())

    def with_params(self, params: dict[str, Tensor]) -> "ModelParams":
        return ModelParams(self.config, params, self.buffers)


@dataclass
class MaskerOutput:
    mask: Tensor  # H_m, (B, T, F)
    estimate: Tensor  # V'_j hat, (B, T, F)
    mixture: Tensor  # V', (B, T, F)


# -- CNN geometry -----------------------------------------------------------
def _block0_cfg(cfg: MaskerConfig) -> DwsBlockConfig:
    # single input channel: the spatial stage fans out to C_o maps directly
    return DwsBlockConfig(1, cfg.C_o, cfg.kernel, cfg.kernel, cfg.beta, multiplier=cfg.C_o)


def _block_cfg(cfg: MaskerConfig) -> DwsBlockConfig:
    return DwsBlockConfig(cfg.C_o, cfg.C_o, cfg.kernel, cfg.kernel, cfg.beta)


COLLAPSE_KERNEL = 3


# -- construction -----------------------------------------------------------
def init_params(cfg: MaskerConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    p: dict[str, Tensor] = {}
    b: dict[str, np.ndarray] = {}
    dt = cfg.dtype
    if cfg.variant == "rnn":
        N = cfg.N_tr
        nn.init_gru(p, "masker.enc_fwd", N, N, rng, dt)
        nn.init_gru(p, "masker.enc_bwd", N, N, rng, dt)
        nn.init_gru(p, "masker.dec", 2 * N, 2 * N, rng, dt)
    else:
        C = cfg.C_o
        nn.init_dws_block(p, b, "masker.enc0", _block0_cfg(cfg), rng, dt)
        nn.init_batch_norm(p, b, "masker.enc0.bn_out", C, dt)
        for i in range(1, cfg.L_enc + 1):
            nn.init_dws_block(p, b, f"masker.enc{i}", _block_cfg(cfg), rng, dt)
            nn.init_batch_norm(p, b, f"masker.enc{i}.bn_out", C, dt)
        nn.init_transposed_conv(p, "masker.up", C, C, 1, cfg.pool_enc[1], rng, bias=False, dtype=dt)
        for i in (1, 2):
            nn.init_dws_block(p, b, f"masker.dec{i}", _block_cfg(cfg), rng, dt)
            nn.init_batch_norm(p, b, f"masker.dec{i}.bn_out", C, dt)
        nn.init_conv(p, "masker.collapse", C, 1, COLLAPSE_KERNEL, COLLAPSE_KERNEL, rng, bias=False, dtype=dt)
    half_f = cfg.F // 2
    nn.init_linear(p, "masker.fnn_m", cfg.fnn_in, cfg.F, rng, dt)
    nn.init_linear(p, "denoiser.fnn_d1", cfg.F, half_f, rng, dt)
    nn.init_linear(p, "denoiser.fnn_d2", half_f, cfg.F, rng, dt)
    # both masks start near pass-through so no output band begins with a dead ReLU
    for name in ("masker.fnn_m.bias", "denoiser.fnn_d2.bias"):
        p[name] = Tensor(np.ones(cfg.F), requires_grad=True, dtype=dt)
    return ModelParams(cfg, p, b)


def count_params(cfg: MaskerConfig) -> dict[str, int]:
    """Trainable scalar counts (BN running statistics excluded)."""
    if cfg.variant == "rnn":
        N = cfg.N_tr
        masker = 2 * nn.count_gru(N, N) + nn.count_gru(2 * N, 2 * N)
    else:
        C = cfg.C_o
        bn = 2 * C
        masker = nn.count_dws_block(_block0_cfg(cfg)) + bn
        masker += cfg.L_enc * (nn.count_dws_block(_block_cfg(cfg)) + bn)
        masker += C * C * cfg.pool_enc[1]
        masker += 2 * (nn.count_dws_block(_block_cfg(cfg)) + bn)
        masker += C * COLLAPSE_KERNEL * COLLAPSE_KERNEL
    masker += nn.count_linear(cfg.fnn_in, cfg.F)
    half_f = cfg.F // 2
    denoiser = nn.count_linear(cfg.F, half_f) + nn.count_linear(half_f, cfg.F)
    return {"masker": masker, "denoiser": denoiser, "total": masker + denoiser}


def delta_law(C: int) -> int:
    """Count increase from two extra encoder blocks (each block plus its BN)."""
    return 2 * (C * C + 31 * C)


# -- forward passes ---------------------------------------------------------
def _as_batch(V, cfg: MaskerConfig) -> Tensor:
    V = tn.as_tensor(V, dtype=cfg.dtype)
    if V.ndim == 2:
        V = V.reshape(1, *V.shape)
    if V.ndim != 3 or V.shape[1:] != (cfg.T + cfg.L, cfg.F):
        raise ShapeError(f"masker input must be ({cfg.T + cfg.L}, {cfg.F}) per example, got {V.shape}")
    if np.any(V.data < 0):
        raise ValueError("masker input must be nonnegative")
    return V


def temporal_trim(H: Tensor, cfg: MaskerConfig) -> Tensor:
    """Drop the context frames: keep rows floor(L/2) .. floor(L/2) + T - 1 of axis 1."""
    return tn.slice_axis(H, 1, cfg.half, cfg.half + cfg.T)


def rnn_encode(V: Tensor, cfg: MaskerConfig, params) -> Tensor:
    """Bi-directional encoder with the residual connection, before trimming: (B, T+L, 2 N_tr)."""
    v_tr = V[..., :cfg.N_tr]
    v_rev = tn.flip(v_tr, 1)
    fwd = nn.gru_sequence(v_tr, params, "masker.enc_fwd")
    bwd = nn.gru_sequence(v_rev, params, "masker.enc_bwd")
    return tn.concat([fwd, bwd], axis=-1) + tn.concat([v_tr, v_rev], axis=-1)


def _finish_masker(h_dec: Tensor, V: Tensor, cfg: MaskerConfig, params) -> MaskerOutput:
    mask = nn.relu(nn.linear(h_dec, params, "masker.fnn_m"))
    v_prime = temporal_trim(V, cfg)
    return MaskerOutput(mask, v_prime * mask, v_prime)


def rnn_masker_forward(V, cfg: MaskerConfig, params, mode: str = "train") -> MaskerOutput:
    V = _as_batch(V, cfg)
    h_enc = temporal_trim(rnn_encode(V, cfg, params), cfg)
    h_dec = nn.gru_sequence(h_enc, params, "masker.dec")
    return _finish_masker(h_dec, V, cfg, params)


def cnn_masker_forward(V, cfg: MaskerConfig, params, buffers, mode: str = "train",
                       rng: np.random.Generator | None = None) -> MaskerOutput:
    V = _as_batch(V, cfg)
    if mode == "train" and rng is None and (cfg.p_enc > 0 or cfg.p_dec > 0):
        raise ValueError("cnn_masker_forward: train mode with dropout needs an rng")
    B, S, _ = V.shape
    h = V[..., :cfg.cropped_bins].reshape(B, 1, S, cfg.cropped_bins)

    h = nn.dws_block(h, _block0_cfg(cfg), params, buffers, "masker.enc0", mode)
    h = nn.batch_norm(h, params, buffers, "masker.enc0.bn_out", mode)
    h = nn.max_pool(h, *cfg.pool_enc)
    h = nn.dropout(h, cfg.p_enc, mode, rng)
    for i in range(1, cfg.L_enc + 1):
        h = nn.dws_block(h, _block_cfg(cfg), params, buffers, f"masker.enc{i}", mode)
        h = nn.batch_norm(h, params, buffers, f"masker.enc{i}.bn_out", mode)
        h = nn.dropout(h, cfg.p_enc, mode, rng)

    h = nn.transposed_conv(h, params, "masker.up", stride=cfg.pool_enc)
    for i in (1, 2):
        h = nn.dws_block(h, _block_cfg(cfg), params, buffers, f"masker.dec{i}", mode)
        h = nn.batch_norm(h, params, buffers, f"masker.dec{i}.bn_out", mode)
    h = nn.max_pool(h, *cfg.pool_dec)
    h = nn.dropout(h, cfg.p_dec, mode, rng)
    h = nn.conv2d(h, params, "masker.collapse", padding=COLLAPSE_KERNEL // 2)
    h = temporal_trim(h.reshape(B, S, cfg.fnn_in), cfg)
    return _finish_masker(h, V, cfg, params)


def masker_forward(V, model: ModelParams, mode: str = "train", rng=None) -> MaskerOutput:
    cfg = model.config
    if cfg.variant == "rnn":
        return rnn_masker_forward(V, cfg, model.params, mode)
    return cnn_masker_forward(V, cfg, model.params, model.buffers, mode, rng)


def denoiser_forward(v_est: Tensor, params) -> Tensor:
    if np.any(tn.as_tensor(v_est).data < 0):
        raise ValueError("denoiser input must be nonnegative")
    h1 = nn.relu(nn.linear(v_est, params, "denoiser.fnn_d1"))
    h2 = nn.relu(nn.linear(h1, params, "denoiser.fnn_d2"))
    return v_est * h2


def mad_forward(V, model: ModelParams, mode: str = "train", rng=None) -> tuple[Tensor, Tensor]:
    """Masker then denoiser; returns (first estimate, refined estimate), each (B, T, F)."""
    out = masker_forward(V, model, mode, rng)
    return out.estimate, denoiser_forward(out.estimate, model.params)
