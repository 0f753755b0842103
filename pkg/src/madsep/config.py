"""Flat ``key = value`` run configuration with override precedence
CLI > file > defaults.  The resolved configuration is echoed verbatim into
every output header (history CSV comments, checkpoint header)."""
from __future__ import annotations

import configparser
from dataclasses import dataclass, fields
from pathlib import Path

from .models import MaskerConfig
from .training import LossConfig, OptimizerState

_SECTION = "run"


class RunConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    variant: str = "rnn"
    L_enc: int = 7
    C_o: int = 256
    T: int = 60
    L: int = 10
    N_tr: int = 744
    pool_dec: int = 8
    p_enc: float = 0.25
    p_dec: float = 0.25
    lr: float = 1e-4
    epochs: int = 100
    batch: int = 4
    seed: int = 0
    clip_norm: float = 0.5
    lambda1: float = 1e-2
    lambda2: float = 1e-4
    window_len: int = 2049
    hop: int = 384
    fft_len: int = 4096
    precision: str = "f64"
    data: str = ""
    out: str = ""

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls) if not f.name.startswith("_")]

    @property
    def F(self) -> int:
        return self.fft_len // 2 + 1

    def masker_config(self) -> MaskerConfig:
        return MaskerConfig(variant=self.variant, F=self.F, N_tr=self.N_tr, T=self.T, L=self.L,
                            L_enc=self.L_enc, C_o=self.C_o, p_enc=self.p_enc, p_dec=self.p_dec,
                            pool_dec=(1, self.pool_dec), precision=self.precision)

    def optimizer(self) -> OptimizerState:
        return OptimizerState(lr=self.lr, clip_norm=self.clip_norm)

    def loss_config(self) -> LossConfig:
        return LossConfig(lambda1=self.lambda1, lambda2=self.lambda2)

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.keys()}

    def echo(self) -> str:
        """Canonical ``key=value`` text of the effective configuration."""
        return "\n".join(f"{k}={getattr(self, k)!s}" for k in self.keys())


def _coerce(key: str, raw, origin: str):
    default = getattr(RunConfig, key)
    try:
        if isinstance(default, bool):
            raise TypeError
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except (TypeError, ValueError):
        raise RunConfigError(f"{origin}: {key}={raw!r} is not a valid {type(default).__name__}") from None
    return str(raw)


def parse_text(text: str, origin: str = "<config>") -> dict:
    """Parse flat ``key = value`` lines (``#`` / ``;`` comments, also after a value) into typed values."""
    cp = configparser.ConfigParser(interpolation=None, strict=True, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(f"[{_SECTION}]\n" + text, source=origin)
    except configparser.Error as exc:
        raise RunConfigError(f"{origin}: {exc}") from None
    if cp.sections() != [_SECTION]:
        raise RunConfigError(f"{origin}: sections are not allowed in a flat config")
    known = set(RunConfig.keys())
    out = {}
    for key, raw in cp.items(_SECTION):
        if key not in known:
            raise RunConfigError(f"{origin}: unknown key {key!r}; valid keys: {', '.join(RunConfig.keys())}")
        out[key] = _coerce(key, raw, origin)
    return out


def parse_overrides(pairs: list[str]) -> dict:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise RunConfigError(f"override {pair!r} must look like key=value")
        key, raw = (s.strip() for s in pair.split("=", 1))
        out.update(parse_text(f"{key}={raw}", origin="command line"))
    return out


def load(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the file (if any), then ``overrides``."""
    values = {}
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise RunConfigError(f"{p}: cannot read config ({exc})") from None
        values.update(parse_text(text, str(p)))
    values.update(overrides or {})
    cfg = RunConfig(**values)
    cfg.masker_config()  # validates the architecture keys early
    if cfg.epochs < 0 or cfg.batch < 1:
        raise RunConfigError(f"epochs must be >= 0 and batch >= 1, got {cfg.epochs}, {cfg.batch}")
    return cfg
