"""Joint masker/denoiser objective, Adam with global-norm clipping, the epoch
loop and a synthetic singing-voice corpus for desk-scale runs."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .models import ModelParams, mad_forward
from .signal import AudioClip, SegmentPair
from .tensor import ShapeError, Tensor

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 1e-2
    lambda2: float = 1e-4
    eps: float = tn.LOG_EPS

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("regularisation weights must be nonnegative")


# -- loss -------------------------------------------------------------------
def gkl(x, y, eps: float = tn.LOG_EPS) -> Tensor:
    """Generalised KL divergence sum(x log(x / y) - x + y).

    Both log arguments are floored at ``eps`` so exact zeros stay finite.
    ``x`` is the reference and is treated as a constant; gradients flow into ``y``.
    """
    xd = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    y = tn.as_tensor(y)
    if xd.shape != y.shape:
        raise ShapeError(f"gkl: shapes {xd.shape} and {y.shape} differ")
    if np.any(xd < 0) or np.any(y.data < 0):
        raise ValueError("gkl: inputs must be nonnegative")
    const = float(np.sum(xd * np.log(np.maximum(xd, eps)) - xd))
    cross = tn.sum_(xd * tn.log(tn.clamp_min(y, eps)))
    return tn.sum_(y) - cross + const


def diag_l1(w: Tensor) -> Tensor:
    """Sum of |w[i, i]| for i < min(rows, cols)."""
    k = min(w.shape)
    idx = np.arange(k)
    return tn.sum_(tn.abs_(w[idx, idx]))


@dataclass
class LossTerms:
    total: Tensor
    masker: float
    denoiser: float
    diag: float
    frob: float

    def as_dict(self) -> dict[str, float]:
        return {"total": self.total.item(), "gkl_masker": self.masker, "gkl_denoiser": self.denoiser,
                "diag_l1": self.diag, "frob_sq": self.frob}


def mad_loss_terms(target, v_masker, v_denoiser, w_fnn_m, w_fnn_d2, cfg: LossConfig = LossConfig()) -> LossTerms:
    g1 = gkl(target, v_masker, cfg.eps)
    g2 = gkl(target, v_denoiser, cfg.eps)
    d = diag_l1(w_fnn_m)
    fr = tn.sum_(tn.square(w_fnn_d2))
    total = g1 + g2 + cfg.lambda1 * d + cfg.lambda2 * fr
    return LossTerms(total, g1.item(), g2.item(), d.item(), fr.item())


def mad_loss(target, v_masker, v_denoiser, w_fnn_m, w_fnn_d2, cfg: LossConfig = LossConfig()) -> Tensor:
    return mad_loss_terms(target, v_masker, v_denoiser, w_fnn_m, w_fnn_d2, cfg).total


# -- optimisation -----------------------------------------------------------
def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float = 0.5) -> tuple[dict[str, np.ndarray], float]:
    """Rescale all gradients jointly so their global L2 norm is at most ``max_norm``.

    Returns the (possibly) rescaled gradients and the norm before clipping.
    """
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return dict(grads), norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


@dataclass
class OptimizerState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 0.5
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: OptimizerState, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> dict[str, Tensor]:
    """One bias-corrected Adam update.  Moments in ``state`` are updated in place."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: gradient {g.shape} for {name} of shape {p.shape}")
        m = b1 * state.m.get(name, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        out[name] = Tensor(p.data - update.astype(p.dtype), requires_grad=True, dtype=p.dtype)
    return out


# -- loop -------------------------------------------------------------------
@dataclass
class EpochRecord:
    epoch: int
    loss: float
    grad_norm: float
    wall_ms: float


@dataclass
class History:
    epochs: list[EpochRecord] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.epochs]

    def to_csv(self, header: str = "") -> str:
        lines = [f"# {line}" for line in header.splitlines()] if header else []
        lines.append("epoch,loss,grad_norm,wall_ms")
        lines += [f"{r.epoch},{r.loss!r},{r.grad_norm!r},{r.wall_ms:.3f}" for r in self.epochs]
        return "\n".join(lines) + "\n"


def _batches(n: int, batch: int, rng: np.random.Generator):
    order = rng.permutation(n)
    # last partial batch is kept
    return [order[i:i + batch] for i in range(0, n, batch)]


def train_step(model: ModelParams, state: OptimizerState, mix: np.ndarray, tgt: np.ndarray,
               loss_cfg: LossConfig, rng: np.random.Generator) -> tuple[ModelParams, LossTerms, float]:
    v1, v2 = mad_forward(mix, model, "train", rng)
    terms = mad_loss_terms(tgt, v1, v2, model.fnn_m_weight, model.fnn_d2_weight, loss_cfg)
    if not np.isfinite(terms.total.item()):
        raise TrainingError(f"non-finite loss: {terms.as_dict()}")
    got = tn.backward(terms.total)
    names = {id(p): k for k, p in model.params.items()}
    grads = {names[id(p)]: g for p, g in got.items() if id(p) in names}
    grads, norm = clip_grad_norm(grads, state.clip_norm)
    new = adam_step(state, model.params, grads)
    return model.with_params(new), terms, norm


def train(model: ModelParams, dataset: list[SegmentPair], epochs: int = 100, batch: int = 4, seed: int = 0,
          state: OptimizerState | None = None, loss_cfg: LossConfig = LossConfig()) -> tuple[ModelParams, History]:
    """Shuffle, batch, forward, loss, backward, clip, Adam; one record per epoch.

    Returns the trained parameters and the history.  Deterministic for a given seed.
    """
    if not dataset:
        raise ValueError("train: empty dataset")
    state = state if state is not None else OptimizerState()
    seeds = np.random.SeedSequence(seed).spawn(2)
    shuffle_rng, dropout_rng = np.random.default_rng(seeds[0]), np.random.default_rng(seeds[1])
    dt = model.config.dtype
    mix_all = np.stack([s.mixture_in for s in dataset]).astype(dt)
    tgt_all = np.stack([s.target for s in dataset]).astype(dt)
    history = History()
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        losses, norms = [], []
        for b, idx in enumerate(_batches(len(dataset), batch, shuffle_rng)):
            try:
                model, terms, norm = train_step(model, state, mix_all[idx], tgt_all[idx], loss_cfg, dropout_rng)
            except (TrainingError, FloatingPointError) as exc:
                raise TrainingError(f"epoch {epoch}, batch {b}: {exc}") from exc
            losses.append(terms.total.item())
            norms.append(norm)
            history.step_losses.append(losses[-1])
        rec = EpochRecord(epoch, float(np.mean(losses)), float(np.mean(norms)), (time.perf_counter() - t0) * 1e3)
        history.epochs.append(rec)
        log.info("epoch %d loss %.6g grad_norm %.4g", epoch, rec.loss, rec.grad_norm)
    return model, history


# -- synthetic corpus -------------------------------------------------------
VOICE_BAND = (200.0, 5000.0)
ACCOMP_LOW_CUTOFF = 150.0
ACCOMP_HIGH_CUTOFF = 7000.0


@dataclass
class SyntheticTrack:
    mixture: AudioClip
    voice: AudioClip
    accompaniment: AudioClip


def _band_noise(rng, n, sr, lo, hi) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / sr)
    spec[(f < lo) | (f > hi)] = 0.0
    out = np.fft.irfft(spec, n)
    return out / (np.std(out) + 1e-12)


def _voice(rng, n, sr) -> np.ndarray:
    t = np.arange(n) / sr
    out = np.zeros(n)
    pos = int(rng.uniform(0.05, 0.2) * sr)
    lo, hi = VOICE_BAND
    while pos < n:
        dur = int(rng.uniform(0.25, 0.6) * sr)
        seg = slice(pos, min(pos + dur, n))
        m = seg.stop - seg.start
        f0 = rng.uniform(1.1 * lo, 440.0)
        depth, rate = rng.uniform(0.005, 0.015), rng.uniform(4.5, 6.5)
        inst = f0 * (1.0 + depth * np.sin(2 * np.pi * rate * t[seg]))
        phase = 2 * np.pi * np.cumsum(inst) / sr
        env = np.sin(np.pi * np.arange(m) / m) ** 0.5
        k_max = int(hi / (f0 * (1.0 + depth)))
        for k in range(1, k_max + 1):
            out[seg] += env * np.sin(k * phase + rng.uniform(0, 2 * np.pi)) / k
        pos = seg.stop + int(rng.uniform(0.0, 0.15) * sr)
    return out / (np.std(out) + 1e-12)


def _accompaniment(rng, n, sr) -> np.ndarray:
    t = np.arange(n) / sr
    low = 0.6 * _band_noise(rng, n, sr, 20.0, ACCOMP_LOW_CUTOFF)
    high = 0.5 * _band_noise(rng, n, sr, ACCOMP_HIGH_CUTOFF, 0.45 * sr)
    tones = sum(
        np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi)) * (0.6 + 0.4 * np.sin(2 * np.pi * rng.uniform(0.5, 2) * t))
        for f in rng.choice([55.0, 65.4, 73.4, 82.4, 98.0, 110.0], size=2, replace=False)
    )
    out = low + high + tones
    return out / (np.std(out) + 1e-12)


def make_synthetic_dataset(seed: int, n_tracks: int, duration_s: float,
                           sample_rate: int = 44100) -> list[SyntheticTrack]:
    """Harmonic "voices" with vibrato inside VOICE_BAND over an accompaniment of
    band-limited noise below ACCOMP_LOW_CUTOFF / above ACCOMP_HIGH_CUTOFF plus
    low tones.  The two sources never share a band."""
    if duration_s < 2.0:
        raise ValueError(f"make_synthetic_dataset: duration must be >= 2 s, got {duration_s}")
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * sample_rate))
    tracks = []
    for _ in range(n_tracks):
        voice = _voice(rng, n, sample_rate)
        accomp = _accompaniment(rng, n, sample_rate)
        peak = np.max(np.abs(voice + accomp))
        voice, accomp = 0.45 * voice / peak, 0.45 * accomp / peak
        mixture = voice + accomp
        tracks.append(SyntheticTrack(
            AudioClip(mixture, sample_rate),
            AudioClip(voice, sample_rate),
            # defined as the residual so mixture - voice - accompaniment is exactly zero
            AudioClip(mixture - voice, sample_rate),
        ))
    return tracks
