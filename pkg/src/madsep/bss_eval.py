"""SDR / SIR / SAR from the projection-based decomposition of an estimate
into target, interference and artifact components, evaluated on overlapping
windows."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.signal

FILTER_LEN = 512
WIN_S = 30.0
HOP_S = 15.0
# component energies this far below the reference count as exact zeros
PERFECT_DB = 200.0


@dataclass
class Decomposition:
    s_target: np.ndarray
    e_interf: np.ndarray
    e_artif: np.ndarray
    ridge: bool = False


def _xcorr_fft(refs: np.ndarray, other: np.ndarray, nfft: int) -> np.ndarray:
    """C[i, j, k] = sum_u refs[i, u] * other[j, u + k] for k in [0, nfft)."""
    fr = np.fft.rfft(refs, nfft)
    fo = np.fft.rfft(other, nfft)
    return np.fft.irfft(np.conj(fr)[:, None, :] * fo[None, :, :], nfft)


def _project(estimate: np.ndarray, refs: np.ndarray, flen: int) -> tuple[np.ndarray, bool]:
    """Least-squares projection of ``estimate`` onto every shift 0..flen-1 of
    every row of ``refs``.  Returns a signal of length n + flen - 1."""
    nsrc, n = refs.shape
    nfft = int(2 ** np.ceil(np.log2(n + flen - 1)))
    lags = np.arange(flen)
    C = _xcorr_fft(refs, refs, nfft)
    # G[(i, tau), (j, sigma)] = C[i, j, tau - sigma]  (negative lags wrap)
    diff = lags[:, None] - lags[None, :]
    G = C[:, :, diff % nfft].transpose(0, 2, 1, 3).reshape(nsrc * flen, nsrc * flen)
    D = _xcorr_fft(refs, estimate[None, :], nfft)[:, 0, :flen].reshape(-1)
    ridge = False
    try:
        coef = scipy.linalg.solve(G, D, assume_a="pos")
        if not np.all(np.isfinite(coef)):
            raise np.linalg.LinAlgError
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgWarning):
        ridge = True
        G = G + 1e-10 * np.trace(G) / len(G) * np.eye(len(G))
        coef = np.linalg.lstsq(G, D, rcond=None)[0]
    coef = coef.reshape(nsrc, flen)
    out = np.zeros(n + flen - 1)
    for i in range(nsrc):
        out += scipy.signal.fftconvolve(refs[i], coef[i])
    return out, ridge


def decompose(estimate, target, interferers=(), flen: int = FILTER_LEN) -> Decomposition:
    """Split ``estimate`` into s_target + e_interf + e_artif.

    The components live on the estimate zero-padded by ``flen - 1`` samples,
    the support of the allowed distortion filters.
    """
    est = np.asarray(estimate, dtype=np.float64)
    tgt = np.asarray(target, dtype=np.float64)
    others = [np.asarray(x, dtype=np.float64) for x in interferers]
    if est.ndim != 1 or tgt.shape != est.shape or any(o.shape != est.shape for o in others):
        raise ValueError("decompose: estimate, target and interferers must be 1-D and equally long")
    if not np.any(tgt):
        raise ValueError("decompose: target is all zeros")
    padded = np.concatenate([est, np.zeros(flen - 1)])
    s_target, ridge_t = _project(est, tgt[None, :], flen)
    if others:
        p_all, ridge_a = _project(est, np.vstack([tgt] + others), flen)
    else:
        p_all, ridge_a = s_target, False
    return Decomposition(s_target, p_all - s_target, padded - p_all, ridge_t or ridge_a)


def _db(num: float, den: float) -> float:
    if den <= num * 10 ** (-PERFECT_DB / 10):
        return float("inf")
    return float(10 * np.log10(num / den))


def ratios(s_target, e_interf, e_artif) -> tuple[float, float, float]:
    """(SDR, SIR, SAR) in dB; +inf when the distortion term vanishes."""
    s, ei, ea = (np.asarray(v, dtype=np.float64) for v in (s_target, e_interf, e_artif))
    e_st = float(np.sum(s ** 2))
    sdr = _db(e_st, float(np.sum((ei + ea) ** 2)))
    sir = _db(e_st, float(np.sum(ei ** 2)))
    sar = _db(float(np.sum((s + ei) ** 2)), float(np.sum(ea ** 2)))
    return sdr, sir, sar


@dataclass
class SegmentScore:
    index: int
    start: int
    sdr: float
    sir: float
    sar: float


@dataclass
class EvalReport:
    track: str
    segments: list[SegmentScore] = field(default_factory=list)
    skipped: int = 0
    ridge: bool = False

    def _median(self, attr: str) -> float:
        return float(np.median([getattr(s, attr) for s in self.segments]))

    @property
    def sdr(self) -> float:
        return self._median("sdr")

    @property
    def sir(self) -> float:
        return self._median("sir")

    @property
    def sar(self) -> float:
        return self._median("sar")

    def to_csv(self, header: bool = True) -> str:
        lines = ["track,segment,SDR,SIR,SAR"] if header else []
        lines += [f"{self.track},{s.index},{s.sdr:.4f},{s.sir:.4f},{s.sar:.4f}" for s in self.segments]
        lines.append(f"{self.track},median,{self.sdr:.4f},{self.sir:.4f},{self.sar:.4f}")
        return "\n".join(lines) + "\n"

    def table(self) -> str:
        rows = [f"{'segment':>8} {'SDR':>9} {'SIR':>9} {'SAR':>9}"]
        rows += [f"{s.index:>8} {s.sdr:>9.2f} {s.sir:>9.2f} {s.sar:>9.2f}" for s in self.segments]
        rows.append(f"{'median':>8} {self.sdr:>9.2f} {self.sir:>9.2f} {self.sar:>9.2f}")
        if self.skipped:
            rows.append(f"({self.skipped} silent-target segment(s) skipped)")
        return "\n".join(rows)


def segment_starts(n: int, win: int, hop: int) -> list[int]:
    if n <= win:
        return [0]
    return list(range(0, n - win + 1, hop))


def segmented_eval(estimate, target, interferers=(), sample_rate: int = 44100, win_s: float = WIN_S,
                   hop_s: float = HOP_S, track: str = "track", flen: int = FILTER_LEN) -> EvalReport:
    """Decompose and score each window; windows with a silent target are skipped."""
    if not win_s > hop_s > 0:
        raise ValueError(f"segmented_eval: need win_s > hop_s > 0, got {win_s}, {hop_s}")
    est = np.asarray(estimate, dtype=np.float64)
    tgt = np.asarray(target, dtype=np.float64)
    others = [np.asarray(x, dtype=np.float64) for x in interferers]
    win, hop = int(round(win_s * sample_rate)), int(round(hop_s * sample_rate))
    report = EvalReport(track)
    for k, start in enumerate(segment_starts(len(est), win, hop)):
        sl = slice(start, start + win)
        if not np.any(tgt[sl]):
            report.skipped += 1
            continue
        d = decompose(est[sl], tgt[sl], [o[sl] for o in others], flen)
        report.ridge |= d.ridge
        report.segments.append(SegmentScore(k, start, *ratios(d.s_target, d.e_interf, d.e_artif)))
    if not report.segments:
        raise ValueError("segmented_eval: no segment with a non-silent target")
    return report


def aggregate(reports: list[EvalReport]) -> tuple[float, float, float]:
    """Median across tracks of the per-track medians."""
    return tuple(float(np.median([getattr(r, a) for r in reports])) for a in ("sdr", "sir", "sar"))
