"""Audio I/O, STFT/ISTFT, band trimming and sequence segmentation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

WINDOW_LEN = 2049
HOP = 384
FFT_LEN = 4096
SAMPLE_RATE = 44100
ISTFT_EPS = 1e-10


class AudioError(OSError):
    pass


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"AudioClip: samples must be 1-D, got shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError(f"AudioClip: sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("AudioClip: non-finite samples")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class Spectrogram:
    magnitude: np.ndarray  # (frames, F)
    phase: np.ndarray  # (frames, F)
    length: int  # samples in the analysed signal
    sample_rate: int = SAMPLE_RATE
    window_len: int = WINDOW_LEN
    hop: int = HOP
    fft_len: int = FFT_LEN

    def __post_init__(self):
        if self.magnitude.shape != self.phase.shape:
            raise ValueError(f"Spectrogram: magnitude {self.magnitude.shape} and phase {self.phase.shape} differ")
        if self.magnitude.ndim != 2 or self.magnitude.shape[1] != self.fft_len // 2 + 1:
            raise ValueError(
                f"Spectrogram: expected (frames, {self.fft_len // 2 + 1}) planes, got {self.magnitude.shape}"
            )
        if np.any(self.magnitude < 0):
            raise ValueError("Spectrogram: negative magnitude")

    @property
    def n_frames(self) -> int:
        return self.magnitude.shape[0]

    @property
    def n_bins(self) -> int:
        return self.magnitude.shape[1]

    def with_magnitude(self, magnitude: np.ndarray) -> "Spectrogram":
        return Spectrogram(magnitude, self.phase, self.length, self.sample_rate,
                           self.window_len, self.hop, self.fft_len)


@dataclass
class SegmentPair:
    mixture_in: np.ndarray  # (T + L, F)
    target: np.ndarray  # (T, F)
    T: int
    L: int
    index: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mixture_in.shape[0] != self.T + self.L or self.target.shape[0] != self.T:
            raise ValueError(
                f"SegmentPair: rows {self.mixture_in.shape[0]}/{self.target.shape[0]} != {self.T + self.L}/{self.T}"
            )
        if np.any(self.mixture_in < 0) or np.any(self.target < 0):
            raise ValueError("SegmentPair: negative magnitude")


# -- WAV -----------------------------------------------------------------
def load_wav_mono(path) -> AudioClip:
    """Read a PCM/float WAV and average its channels to mono in [-1, 1]."""
    path = Path(path)
    try:
        rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise AudioError(f"{path}: file not found") from None
    except (ValueError, EOFError, OSError) as exc:
        raise AudioError(f"{path}: unreadable WAV ({exc})") from None
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        # 24-bit PCM arrives left-justified in int32
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float64)
    else:
        raise AudioError(f"{path}: unsupported sample format {data.dtype}")
    if x.ndim == 2:
        if x.shape[1] > 2:
            raise AudioError(f"{path}: unsupported channel count {x.shape[1]}")
        x = x.mean(axis=1)
    return AudioClip(x, int(rate))


def write_wav(path, clip: AudioClip) -> None:
    """Write 16-bit PCM, clipping to [-1, 1]."""
    pcm = np.round(np.clip(clip.samples, -1.0, 1.0 - 1.0 / 32768.0) * 32768.0).astype(np.int16)
    try:
        wavfile.write(Path(path), clip.sample_rate, pcm)
    except OSError as exc:
        raise AudioError(f"{path}: cannot write ({exc})") from None


# -- STFT ----------------------------------------------------------------
def hamming(n: int) -> np.ndarray:
    """Periodic Hamming window."""
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * np.arange(n) / n)


def n_frames_for(length: int, window_len: int = WINDOW_LEN, hop: int = HOP) -> int:
    padded = length + 2 * (window_len // 2)
    return 1 + (padded - window_len) // hop


def stft(clip: AudioClip, window_len: int = WINDOW_LEN, hop: int = HOP, fft_len: int = FFT_LEN) -> Spectrogram:
    x = clip.samples
    if len(x) < window_len:
        raise ValueError(f"stft: clip of {len(x)} samples shorter than one window ({window_len})")
    if fft_len < window_len:
        raise ValueError(f"stft: fft_len {fft_len} below window_len {window_len}")
    pad = window_len // 2
    xp = np.pad(x, pad, mode="reflect")
    n = n_frames_for(len(x), window_len, hop)
    frames = np.lib.stride_tricks.sliding_window_view(xp, window_len)[::hop][:n]
    spec = np.fft.rfft(frames * hamming(window_len), n=fft_len, axis=1)
    return Spectrogram(np.abs(spec), np.angle(spec), len(x), clip.sample_rate, window_len, hop, fft_len)


def istft(spec: Spectrogram) -> AudioClip:
    """Weighted overlap-add inverse of :func:`stft` (synthesis window = analysis window)."""
    if spec.magnitude.shape != spec.phase.shape:
        raise ValueError(f"istft: magnitude {spec.magnitude.shape} and phase {spec.phase.shape} differ")
    wl, hop = spec.window_len, spec.hop
    win = hamming(wl)
    frames = np.fft.irfft(spec.magnitude * np.exp(1j * spec.phase), n=spec.fft_len, axis=1)[:, :wl] * win
    n = spec.n_frames
    total = (n - 1) * hop + wl
    out = np.zeros(total)
    norm = np.zeros(total)
    for t in range(n):
        out[t * hop:t * hop + wl] += frames[t]
        norm[t * hop:t * hop + wl] += win * win
    out /= np.maximum(norm, ISTFT_EPS)
    pad = wl // 2
    y = out[pad:pad + spec.length]
    if len(y) < spec.length:
        y = np.pad(y, (0, spec.length - len(y)))
    return AudioClip(y, spec.sample_rate)


# -- segmentation --------------------------------------------------------
def trim_bands(V, n_tr: int):
    """Keep the lowest ``n_tr`` frequency bands (last axis)."""
    F = V.shape[-1]
    if not 1 <= n_tr <= F:
        raise ValueError(f"trim_bands: N_tr={n_tr} outside [1, {F}]")
    return V[..., :n_tr]


def n_segments(n_frames: int, T: int) -> int:
    return math.ceil(n_frames / T)


def _frames(mat: np.ndarray, start: int, count: int) -> np.ndarray:
    """Rows [start, start + count) of ``mat`` with zero rows outside its range."""
    out = np.zeros((count, mat.shape[1]), dtype=mat.dtype)
    lo, hi = max(start, 0), min(start + count, mat.shape[0])
    if hi > lo:
        out[lo - start:hi - start] = mat[lo:hi]
    return out


def segment_frames(mix: np.ndarray, T: int, L: int) -> list[np.ndarray]:
    """Mixture inputs of T + L rows whose central T rows tile the track."""
    if T <= 0:
        raise ValueError(f"segment: T must be positive, got {T}")
    if L < 0 or L % 2:
        raise ValueError(f"segment: L must be a non-negative even number, got {L}")
    half = L // 2
    return [_frames(mix, b * T - half, T + L) for b in range(n_segments(mix.shape[0], T))]


def segment(mix: Spectrogram | np.ndarray, tgt: Spectrogram | np.ndarray, T: int, L: int) -> list[SegmentPair]:
    """Cut aligned magnitudes into B = ceil(M / T) training pairs.

    Pair ``b`` targets frames [bT, bT + T); its mixture input spans
    [bT - L/2, bT + T + L/2), zero-padded beyond the track.
    """
    m = mix.magnitude if isinstance(mix, Spectrogram) else np.asarray(mix)
    v = tgt.magnitude if isinstance(tgt, Spectrogram) else np.asarray(tgt)
    if m.shape != v.shape:
        raise ValueError(f"segment: mixture {m.shape} and target {v.shape} are not frame-aligned")
    inputs = segment_frames(m, T, L)
    return [SegmentPair(x, _frames(v, b * T, T), T, L, index=b) for b, x in enumerate(inputs)]


def stitch(outputs: list[np.ndarray], n_frames: int) -> np.ndarray:
    """Concatenate per-segment T-row outputs and cut to the track length."""
    return np.concatenate(outputs, axis=0)[:n_frames]
