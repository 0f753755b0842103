"""Command-line entry point: synth, train, separate, eval, params, gradcheck.

Exit codes: 0 success, 1 computational failure (non-finite loss, failed
gradient check, count mismatch), 2 usage or I/O error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

from . import checkpoint
from . import config as runcfg
from .bss_eval import HOP_S, WIN_S, segmented_eval
from .models import (C_O_GRID, DENOISER_PARAMS, L_ENC_GRID, RNN_MASKER_PARAMS, REFERENCE_TOTALS, ConfigError,
                     MaskerConfig, count_params, delta_law, init_params, mad_forward)
from .signal import AudioClip, AudioError, load_wav_mono, segment, segment_frames, stft, istft, stitch, write_wav
from .tensor import no_grad
from .training import TrainingError, make_synthetic_dataset, train

log = logging.getLogger("madsep")

EXIT_OK, EXIT_COMPUTE, EXIT_USAGE = 0, 1, 2

class UsageError(Exception):
    pass

# -- helpers ---------------------------------------------------------------
def _threads(n: int | None):
    if n is None:
        return nullcontext()
    if n < 1:
        raise UsageError(f"--threads must be >= 1, got {n}")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)

def _overrides(args) -> dict:
    out = runcfg.parse_overrides(args.set or [])
    for key in ("seed", "precision"):
        if getattr(args, key, None) is not None:
            out[key] = getattr(args, key)
    return out

def _mkdir(path: Path) -> None:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"{path}: cannot create directory ({exc})") from None

def _write_text(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise UsageError(f"{path}: cannot write ({exc})") from None

def _stft(clip: AudioClip, cfg: runcfg.RunConfig):
    return stft(clip, cfg.window_len, cfg.hop, cfg.fft_len)

def load_training_pairs(data: Path) -> list[tuple[AudioClip, AudioClip]]:
    """Every ``mixture_<k>.wav`` in ``data`` with its ``voice_<k>.wav``."""
    if not data.is_dir():
        raise UsageError(f"{data}: data directory not found")
    mixes = sorted(data.glob("mixture_*.wav"))
    if not mixes:
        raise UsageError(f"{data}: no mixture_*.wav files")
    pairs = []
    for mix_path in mixes:
        voice_path = data / mix_path.name.replace("mixture_", "voice_", 1)
        if not voice_path.exists():
            raise UsageError(f"{mix_path}: missing partner {voice_path.name}")
        mix, voice = load_wav_mono(mix_path), load_wav_mono(voice_path)
        if len(mix) != len(voice) or mix.sample_rate != voice.sample_rate:
            raise UsageError(f"{mix_path}: length/sample rate differ from {voice_path.name}")
        pairs.append((mix, voice))
    return pairs

# -- commands --------------------------------------------------------------
def cmd_synth(args) -> int:
    seed = args.seed if args.seed is not None else 0
    try:
        tracks = make_synthetic_dataset(seed, args.tracks, args.seconds)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    _mkdir(out)
    for i, tr in enumerate(tracks):
        write_wav(out / f"mixture_{i}.wav", tr.mixture)
        write_wav(out / f"voice_{i}.wav", tr.voice)
        write_wav(out / f"accomp_{i}.wav", tr.accompaniment)
    print(f"wrote {3 * len(tracks)} files to {out}")
    return EXIT_OK

def cmd_train(args) -> int:
    overrides = _overrides(args)
    if args.data:
        overrides["data"] = args.data
    if args.out:
        overrides["out"] = args.out
    cfg = runcfg.load(args.config, overrides)
    if not cfg.data or not cfg.out:
        raise UsageError("train: need a data directory and an output checkpoint (--data/--out or config keys)")
    mcfg = cfg.masker_config()
    dataset = []
    for mix, voice in load_training_pairs(Path(cfg.data)):
        dataset += segment(_stft(mix, cfg), _stft(voice, cfg), mcfg.T, mcfg.L)
    model = init_params(mcfg, cfg.seed)
    model, history = train(model, dataset, cfg.epochs, cfg.batch, cfg.seed, cfg.optimizer(), cfg.loss_config())
    out = Path(cfg.out)
    if out.parent != Path(""):
        _mkdir(out.parent)
    checkpoint.save(out, model, cfg.as_dict())
    hist_path = out.with_suffix(".history.csv")
    _write_text(hist_path, history.to_csv(cfg.echo()))
    final = f"{history.losses[-1]:.6g}" if history.epochs else "n/a (0 epochs)"
    print(f"segments {len(dataset)}  epochs {cfg.epochs}  final loss {final}")
    print(f"checkpoint {out}  history {hist_path}")
    return EXIT_OK

def separate_clip(clip: AudioClip, model, cfg: runcfg.RunConfig) -> AudioClip:
    """STFT, per-segment forward pass, stitching, mixture phase, ISTFT."""
    mcfg = model.config
    spec = _stft(clip, cfg)
    with no_grad():
        outs = [mad_forward(seg, model, "eval")[1].data[0]
                for seg in segment_frames(spec.magnitude, mcfg.T, mcfg.L)]
    est = stitch(outs, spec.n_frames)
    return istft(spec.with_magnitude(est))

def cmd_separate(args) -> int:
    model, run = checkpoint.load(args.ckpt)
    cfg = runcfg.RunConfig(**{k: v for k, v in run.items() if k in runcfg.RunConfig.keys()})
    mcfg = model.config
    requested = {"F": args.fft_len and args.fft_len // 2 + 1, "T": args.T, "L": args.L}
    for key, want in requested.items():
        have = getattr(mcfg, key)
        if want is not None and want != have:
            raise UsageError(f"separate: checkpoint has {key}={have}, requested {key}={want}; refusing to adapt")
    if cfg.F != mcfg.F:
        raise UsageError(f"separate: checkpoint STFT gives F={cfg.F} but the model expects F={mcfg.F}")
    clip = load_wav_mono(args.input)
    est = separate_clip(clip, model, cfg)
    write_wav(args.out, est)
    print(f"wrote {args.out} ({len(est)} samples)")
    return EXIT_OK

def cmd_eval(args) -> int:
    est, ref = load_wav_mono(args.est), load_wav_mono(args.ref)
    interf = [load_wav_mono(p) for p in (args.interf or [])]
    clips = [est, ref, *interf]
    if len({len(c) for c in clips}) != 1 or len({c.sample_rate for c in clips}) != 1:
        raise UsageError("eval: estimate, reference and interferers must share length and sample rate")
    report = segmented_eval(est.samples, ref.samples, [c.samples for c in interf], ref.sample_rate,
                            args.win_s, args.hop_s, track=Path(args.ref).stem)
    sys.stdout.write(report.to_csv())
    if report.ridge:
        print("# note: ill-conditioned projection solved with a ridge", file=sys.stderr)
    return EXIT_OK

def cmd_params(args) -> int:
    if args.variant == "dws-cnn":
        for name, val, grid in (("--L-enc", args.L_enc, L_ENC_GRID), ("--C-o", args.C_o, C_O_GRID)):
            if val not in grid:
                raise UsageError(f"params: {name} {val} is not a grid value; valid choices: {list(grid)}")
    cfg = MaskerConfig(variant=args.variant, L_enc=args.L_enc, C_o=args.C_o)
    counts = count_params(cfg)
    print(f"variant {cfg.variant}")
    print(f"masker   {counts['masker']:>12,}")
    print(f"denoiser {counts['denoiser']:>12,}")
    print(f"total    {counts['total']:>12,}")
    ok = counts["denoiser"] == DENOISER_PARAMS
    if cfg.variant == "rnn":
        ok &= counts["masker"] == RNN_MASKER_PARAMS
        print(f"reference masker {RNN_MASKER_PARAMS:,}: {'match' if ok else 'MISMATCH'}")
    else:
        other = cfg.L_enc - 2 if cfg.L_enc - 2 in L_ENC_GRID else cfg.L_enc + 2
        lo, hi = sorted((other, cfg.L_enc))
        diff = (count_params(cfg.replace(L_enc=hi))["total"] - count_params(cfg.replace(L_enc=lo))["total"])
        law = delta_law(cfg.C_o)
        ok &= diff == law
        print(f"delta law L_enc {lo}->{hi}: {diff:,} vs 2(C^2+31C) = {law:,}: {'ok' if diff == law else 'FAIL'}")
        ref = REFERENCE_TOTALS[(cfg.L_enc, cfg.C_o)]
        print(f"reference total {ref:,}: {'match' if counts['total'] == ref else 'differs'}")
    return EXIT_OK if ok else EXIT_COMPUTE

def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    if args.precision == "f32":
        raise UsageError("gradcheck: finite differences need float64; drop --precision f32")
    results = run_suite(args.seed if args.seed is not None else 0)
    failed = 0
    for r in results:
        rep = r.report
        failed += not rep.passed
        skipped = f" skipped={rep.n_skipped}" if rep.n_skipped else ""
        print(f"{'PASS' if rep.passed else 'FAIL'} {r.name:<40} rel={rep.max_rel_err:.2e} "
              f"abs={rep.max_abs_err:.2e} tol={r.tol:g}{skipped}")
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_COMPUTE

# -- parser ----------------------------------------------------------------
def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--seed", type=int, default=default, help="RNG seed (default 0)")
    parser.add_argument("--threads", type=int, default=default, help="BLAS/OpenMP thread cap")
    parser.add_argument("--precision", choices=("f32", "f64"), default=default, help="float width")
    parser.add_argument("-v", "--verbose", action="store_true", default=default)

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="madsep", description="Masker-denoiser singing voice separation")
    _global_flags(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        _global_flags(sp, suppress=True)
        sp.set_defaults(func=fn)
        return sp

    sp = add("synth", cmd_synth, "write synthetic mixture/voice/accompaniment WAVs")
    sp.add_argument("--out", required=True)
    sp.add_argument("--tracks", type=int, default=2)
    sp.add_argument("--seconds", type=float, default=8.0)

    sp = add("train", cmd_train, "train a model and write a checkpoint plus history CSV")
    sp.add_argument("--config")
    sp.add_argument("--data")
    sp.add_argument("--out")
    sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")

    sp = add("separate", cmd_separate, "estimate the voice of a mixture WAV")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--fft-len", type=int)
    sp.add_argument("--T", type=int)
    sp.add_argument("--L", type=int)

    sp = add("eval", cmd_eval, "segmented SDR/SIR/SAR of an estimate")
    sp.add_argument("--est", required=True)
    sp.add_argument("--ref", required=True)
    sp.add_argument("--interf", action="append")
    sp.add_argument("--win-s", type=float, default=WIN_S)
    sp.add_argument("--hop-s", type=float, default=HOP_S)

    sp = add("params", cmd_params, "audit trainable parameter counts")
    sp.add_argument("--variant", choices=("rnn", "dws-cnn"), default="rnn")
    sp.add_argument("--L-enc", dest="L_enc", type=int, default=7)
    sp.add_argument("--C-o", dest="C_o", type=int, default=256)

    sp = add("gradcheck", cmd_gradcheck, "finite-difference check of every layer and the tiny model")
    sp.add_argument("--scale", choices=("tiny",), default="tiny")
    return p

def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _threads(args.threads):
            return args.func(args)
    except (UsageError, runcfg.RunConfigError, ConfigError, AudioError, checkpoint.CheckpointError,
            OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, FloatingPointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPUTE

def main_entry() -> None:
    sys.exit(main())
