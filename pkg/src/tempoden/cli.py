"""Command-line entry point: ``tempoden <command> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 I/O or file
format error, 3 numeric failure (non-finite training, failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from . import engine as E
from .metrics import evaluate_sequence
from .model import ArchConfig, denoise_video
from .noise import FAMILIES, NoiseSpec, materialize
from .trainer import ABLATION_MODES, TrainConfig, TrainingError, ablate, render_table, resolve_arch, train
from .videoio import FormatError, FrameSequence, atomic_write, load_checkpoint, read_sequence, save_checkpoint, write_sequence

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
SEED_ENV = "TEMPODEN_SEED"

log = logging.getLogger("tempoden")


class UsageError(Exception):
    pass


class NumericFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for I/O here
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# run configuration

RUN_SECTIONS = ("train", "arch", "paths")
PATH_KEYS = ("noisy", "clean", "out", "report")


@dataclass
class RunConfig:
    """Parsed run-config JSON: ``{"train": {...}, "arch": {...}, "paths": {...}}``.

    Every section and key is optional; missing train/arch keys take the
    TrainConfig/ArchConfig defaults. Unknown keys at any level are rejected.
    """

    train: dict = field(default_factory=dict)
    arch: dict | None = None
    paths: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ValueError("run config must be a JSON object")
        unknown = set(d) - set(RUN_SECTIONS)
        if unknown:
            raise ValueError(f"unknown run config sections: {sorted(unknown)}")
        paths = dict(d.get("paths") or {})
        bad = set(paths) - set(PATH_KEYS)
        if bad:
            raise ValueError(f"unknown paths keys: {sorted(bad)}")
        train_d = dict(d.get("train") or {})
        TrainConfig.from_dict(train_d)  # validate early
        arch_d = d.get("arch")
        if arch_d is not None:
            ArchConfig.from_dict(dict(arch_d))
        return cls(train=train_d, arch=None if arch_d is None else dict(arch_d), paths=paths)

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(raw)


def env_seed() -> int | None:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def resolve_train_config(run: RunConfig, args) -> TrainConfig:
    """Flags > config file > TEMPODEN_SEED (seed only) > defaults."""
    d = dict(run.train)
    if "seed" not in d and env_seed() is not None:
        d["seed"] = env_seed()
    for key in ("seed", "epochs", "iters_per_epoch", "max_iters", "patch", "batch", "jobs"):
        val = getattr(args, key, None)
        if val is not None:
            d[key] = val
    if getattr(args, "deterministic", False):
        d["deterministic"] = True
    return TrainConfig.from_dict(d)


def _path(args, run: RunConfig, key: str, required: bool = True):
    val = getattr(args, key, None) or run.paths.get(key)
    if val is None and required:
        raise UsageError(f"--{key} is required (flag or paths.{key} in the config)")
    return val


def write_json(path: str | Path, obj) -> None:
    atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    from .synth import translating_texture

    seed = args.seed if args.seed is not None else (env_seed() or 0)
    frames = translating_texture(args.frames, args.height, args.width, (args.vy, args.vx), args.channels, seed)
    path = write_sequence(FrameSequence(frames, fps=args.fps), args.out, encoding="f32raw")
    print(path)
    return EXIT_OK


def cmd_corrupt(args) -> int:
    seed = args.seed if args.seed is not None else (env_seed() or 0)
    try:
        spec = NoiseSpec(args.noise, args.level, seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    clean = read_sequence(args.clean)
    print(materialize(clean, spec, args.out))
    return EXIT_OK


def _load_arch(run: RunConfig) -> ArchConfig | None:
    return None if run.arch is None else ArchConfig.from_dict(run.arch)


def cmd_train(args) -> int:
    run = RunConfig.load(args.config)
    cfg = resolve_train_config(run, args)
    noisy = read_sequence(_path(args, run, "noisy"))
    out = _path(args, run, "out")
    arch = resolve_arch(cfg, _load_arch(run), noisy.geometry[0])
    params, report = train(noisy.frames, cfg, arch)
    rep = report.to_dict()
    save_checkpoint(params, rep, out)
    report_path = _path(args, run, "report", required=False)
    if report_path:
        write_json(report_path, rep)
    print(out)
    return EXIT_OK


def cmd_denoise(args) -> int:
    params, _ = load_checkpoint(args.ckpt)
    noisy = read_sequence(args.noisy)
    if noisy.geometry[0] != params.arch.image_channels:
        raise UsageError(f"checkpoint expects {params.arch.image_channels} channels, sequence has {noisy.geometry[0]}")
    den = denoise_video(params, noisy.frames, batch=args.batch, jobs=args.jobs)
    print(write_sequence(FrameSequence(den, fps=noisy.fps), args.out, encoding="f32raw"))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    clean = read_sequence(args.clean)
    test = read_sequence(args.test)
    if clean.frames.shape != test.frames.shape:
        raise UsageError(f"sequences differ in shape: {clean.frames.shape} vs {test.frames.shape}")
    score = evaluate_sequence(clean.frames, test.frames, peak=args.peak)
    rep = score.to_dict()
    rep["config"] = {"peak": args.peak}
    rep["version"] = __version__
    if args.report:
        write_json(args.report, rep)
    print(f"mean PSNR {score.mean_psnr_db:.3f} dB  mean SSIM {score.mean_ssim:.4f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    run = RunConfig.load(args.config)
    cfg = resolve_train_config(run, args)
    noisy = read_sequence(_path(args, run, "noisy"))
    clean = read_sequence(_path(args, run, "clean"))
    if clean.frames.shape != noisy.frames.shape:
        raise UsageError(f"clean {clean.frames.shape} and noisy {noisy.frames.shape} sequences differ in shape")
    arch = _load_arch(run)
    rep = ablate(noisy.frames, clean.frames, cfg, args.mode, arch, values=args.values, peak=args.peak, base_fps=args.base_fps)
    rep["arch"] = None if arch is None else arch.to_dict()
    report_path = _path(args, run, "report", required=False)
    if report_path:
        write_json(report_path, rep)
    if args.table or not report_path:
        print(render_table(rep))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    seed = args.seed if args.seed is not None else (env_seed() or 0)
    try:
        results = run_suite(seed=seed, precisions=tuple(args.precision), corrupt=args.corrupt, pipeline=not args.ops_only)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    by_op: dict[str, list] = {}
    for r in results:
        by_op.setdefault(r.op, []).append(r)
    for op, rs in by_op.items():
        cells = "  ".join(f"{r.precision} {r.max_rel_error:.3e} (tol {r.tolerance:.0e}, {'ok' if r.passed else 'FAIL'})" for r in rs)
        print(f"{op:<20} {cells}")
    failed = [r for r in results if not r.passed]
    if failed:
        raise NumericFailure(f"{len(failed)} gradient check(s) failed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_train_overrides(p):
    p.add_argument("--config", help="run config JSON (sections train/arch/paths)")
    p.add_argument("--seed", type=int, help=f"overrides train.seed (fallback: ${SEED_ENV})")
    p.add_argument("--deterministic", action="store_true", help="single-threaded BLAS, no wall-clock in reports")
    p.add_argument("--jobs", type=int, help="worker threads")
    p.add_argument("--epochs", type=int)
    p.add_argument("--iters-per-epoch", dest="iters_per_epoch", type=int)
    p.add_argument("--max-iters", dest="max_iters", type=int)
    p.add_argument("--patch", type=int)
    p.add_argument("--batch", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tempoden", description="Unsupervised video denoising with a temporal blind-spot filter.")
    parser.add_argument("--version", action="version", version=f"tempoden {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic translating-texture clip")
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=60)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--vy", type=int, default=0)
    p.add_argument("--vx", type=int, default=1)
    p.add_argument("--fps", type=float, default=120.0)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("corrupt", help="materialize a fixed-noise copy of a clean sequence")
    p.add_argument("--clean", required=True, help="clean manifest or directory")
    p.add_argument("--noise", required=True, choices=FAMILIES)
    p.add_argument("--level", required=True, type=float, help="sigma (8-bit units), lambda, or impulse ratio")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("train", help="fit the denoiser on noisy frames")
    p.add_argument("--noisy")
    p.add_argument("--out", help="checkpoint path")
    p.add_argument("--report", help="TrainReport JSON path")
    _add_train_overrides(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("denoise", help="run a checkpoint over a noisy sequence")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--noisy", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--deterministic", action="store_true", help="accepted for symmetry; inference is always deterministic")
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("evaluate", help="PSNR/SSIM of a sequence against a clean reference")
    p.add_argument("--clean", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--report")
    p.add_argument("--peak", type=float, default=255.0, help="reporting scale for PSNR/SSIM")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="retrain under each ablation condition and score")
    p.add_argument("--mode", required=True, choices=ABLATION_MODES)
    p.add_argument("--noisy")
    p.add_argument("--clean")
    p.add_argument("--report")
    p.add_argument("--values", type=int, nargs="+", help="override the swept N or stride values")
    p.add_argument("--peak", type=float, default=255.0)
    p.add_argument("--base-fps", dest="base_fps", type=float, help="fps at stride 1 (default: 120)")
    p.add_argument("--table", action="store_true", help="also print an aligned text table")
    _add_train_overrides(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and the toy pipeline")
    p.add_argument("--seed", type=int)
    p.add_argument("--precision", nargs="+", choices=("f32", "f64"), default=["f32", "f64"])
    # test hooks: break one op's backward / skip the slow pipeline check
    p.add_argument("--corrupt", help=argparse.SUPPRESS)
    p.add_argument("--ops-only", dest="ops_only", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        msg, code = str(exc), EXIT_USAGE
    except (FormatError, OSError) as exc:
        msg, code = str(exc), EXIT_IO
    except (TrainingError, NumericFailure, E.NonFiniteError, FloatingPointError) as exc:
        msg, code = str(exc), EXIT_NUMERIC
    except ValueError as exc:
        msg, code = str(exc), EXIT_USAGE
    print(f"error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
