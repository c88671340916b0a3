"""Unsupervised training on noisy frames only, plus ablation sweeps.

The network sees a stack of N noisy patches and is regressed onto the noisy
central patch. With the temporal filter on, the central frame is zeroed
before the denoiser, so the cheapest solution (copying the target) is not
available and the loss cannot drop below the target's noise energy.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import __version__
from . import engine as E
from .engine import Tensor
from .metrics import evaluate_sequence
from .model import ArchConfig, ModelParams, denoise_video, forward_window, model_init

log = logging.getLogger(__name__)

MAX_EPOCHS = 100
FPS_BY_STRIDE = {1: 120, 2: 60, 4: 30, 5: 24}


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    n_frames: int = 7
    patch: int = 128
    batch: int = 8
    epochs: int = 25
    lr0: float = 1e-3
    lr_halving: int = 10
    patience: int = 5
    seed: int = 0
    deterministic: bool = True
    temporal_filter: bool = True
    temporal_stride: int = 1
    augment: bool = True
    iters_per_epoch: int | None = None
    max_iters: int | None = None
    val_fraction: float = 0.1
    jobs: int = 1

    def __post_init__(self):
        if self.n_frames < 3 or self.n_frames % 2 == 0:
            raise ValueError(f"n_frames must be odd and >= 3, got {self.n_frames}")
        if self.patch < 16 or self.patch % 4:
            raise ValueError(f"patch must be a multiple of 4 and >= 16, got {self.patch}")
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")
        if not 1 <= self.epochs <= MAX_EPOCHS:
            raise ValueError(f"epochs must be in [1, {MAX_EPOCHS}], got {self.epochs}")
        if self.lr0 <= 0 or self.lr_halving < 1:
            raise ValueError("lr0 must be > 0 and lr_halving >= 1")
        if self.patience < 0:
            raise ValueError(f"patience must be >= 0, got {self.patience}")
        if self.temporal_stride < 1:
            raise ValueError(f"temporal_stride must be >= 1, got {self.temporal_stride}")
        if self.iters_per_epoch is not None and self.iters_per_epoch < 1:
            raise ValueError("iters_per_epoch must be >= 1")
        if self.max_iters is not None and self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must be in [0, 1), got {self.val_fraction}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    stop_reason: str = ""
    epochs_run: int = 0
    iterations: int = 0
    best_epoch: int = -1
    wall_time_s: float | None = None
    config: dict = field(default_factory=dict)
    arch: dict = field(default_factory=dict)
    version: str = __version__

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainReport":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def lr_at(epoch: int, lr0: float, halving: int = 10) -> float:
    return lr0 * 2.0 ** -(epoch // halving)


def early_stop_check(history: list[float], patience: int) -> bool:
    """True when the best value is at least max(patience, 1) epochs old."""
    if not history:
        raise ValueError("early_stop_check: empty history")
    best = int(np.argmin(history))
    return (len(history) - 1 - best) >= max(patience, 1)


# ---------------------------------------------------------------------------
# sampling


def window_centers(T: int, n_frames: int, stride: int) -> np.ndarray:
    """Centres whose full window lies inside the sequence."""
    reach = (n_frames // 2) * stride
    return np.arange(reach, T - reach)


def window_frames(t: int, n_frames: int, stride: int) -> list[int]:
    k = n_frames // 2
    return [t + i * stride for i in range(-k, k + 1)]


def crop_sample(frames: np.ndarray, t: int, y: int, x: int, patch: int, n_frames: int, stride: int):
    """Same crop from every frame of the window; returns (stack, target)."""
    idx = window_frames(t, n_frames, stride)
    win = frames[idx, :, y : y + patch, x : x + patch]
    stack = win.reshape(-1, patch, patch)
    target = frames[t, :, y : y + patch, x : x + patch]
    return stack, target


def augment(stack: np.ndarray, target: np.ndarray, n_frames: int, rng: np.random.Generator):
    """Random time reversal and horizontal flip (each with probability 1/2)."""
    if rng.random() < 0.5:
        stack = time_reverse(stack, n_frames)
    if rng.random() < 0.5:
        stack, target = stack[..., ::-1], target[..., ::-1]
    return np.ascontiguousarray(stack), np.ascontiguousarray(target)


def time_reverse(stack: np.ndarray, n_frames: int) -> np.ndarray:
    c = stack.shape[0] // n_frames
    return stack.reshape(n_frames, c, *stack.shape[1:])[::-1].reshape(stack.shape)


def sample_patch_batch(frames: np.ndarray, centers: np.ndarray, config: TrainConfig, rng: np.random.Generator):
    """B random (window stack, central target) patch pairs as numpy arrays."""
    T, C, H, W = frames.shape
    p = config.patch
    if p > H or p > W:
        raise ValueError(f"patch {p} larger than frame {H}x{W}")
    stacks, targets = [], []
    for _ in range(config.batch):
        t = int(centers[rng.integers(len(centers))])
        y = int(rng.integers(H - p + 1))
        x = int(rng.integers(W - p + 1))
        s, tg = crop_sample(frames, t, y, x, p, config.n_frames, config.temporal_stride)
        if config.augment:
            s, tg = augment(s, tg, config.n_frames, rng)
        stacks.append(s)
        targets.append(tg)
    return np.stack(stacks), np.stack(targets)


def _validation_batch(frames: np.ndarray, centers: np.ndarray, config: TrainConfig):
    _, _, H, W = frames.shape
    p = config.patch
    y, x = (H - p) // 2, (W - p) // 2
    pairs = [crop_sample(frames, int(t), y, x, p, config.n_frames, config.temporal_stride) for t in centers]
    return np.stack([s for s, _ in pairs]), np.stack([t for _, t in pairs])


# ---------------------------------------------------------------------------
# training loop


def resolve_arch(config: TrainConfig, arch: ArchConfig | None, image_channels: int) -> ArchConfig:
    base = arch or ArchConfig(image_channels=image_channels, out_channels=image_channels)
    if base.image_channels != image_channels:
        raise ValueError(f"architecture expects {base.image_channels} image channels, data has {image_channels}")
    return replace(
        base,
        n_frames=config.n_frames,
        temporal_filter=config.temporal_filter,
        temporal_stride=config.temporal_stride,
    )


def train(noisy: np.ndarray, config: TrainConfig, arch: ArchConfig | None = None) -> tuple[ModelParams, TrainReport]:
    """Fit the pipeline to a (T, C, H, W) noisy sequence; no clean data involved.

    Returns the parameters from the epoch with the lowest validation loss.
    """
    from threadpoolctl import threadpool_limits

    frames = np.asarray(noisy, dtype=np.float32)
    if frames.ndim != 4 or frames.shape[0] == 0:
        raise TrainingError("train: empty or malformed dataset")
    arch = resolve_arch(config, arch, frames.shape[1])
    centers = window_centers(frames.shape[0], config.n_frames, config.temporal_stride)
    if len(centers) == 0:
        raise TrainingError(
            f"train: sequence of {frames.shape[0]} frames is too short for N={config.n_frames}, stride={config.temporal_stride}"
        )
    n_val = int(round(config.val_fraction * len(centers))) if len(centers) > 1 else 0
    if config.val_fraction > 0 and len(centers) > 1:
        n_val = max(1, n_val)
    train_c = centers[: len(centers) - n_val]
    val_c = centers[len(centers) - n_val :]
    iters = config.iters_per_epoch or math.ceil(len(train_c) / config.batch)

    rng = np.random.default_rng(config.seed)
    params = model_init(arch, int(rng.integers(2**63)))
    opt = E.Adam(params.parameters(), lr=config.lr0)
    report = TrainReport(config=config.to_dict(), arch=arch.to_dict())
    best, best_val = params.copy(), math.inf
    val_stack = _validation_batch(frames, val_c, config) if n_val else None
    start = time.perf_counter()
    step = 0

    with threadpool_limits(limits=1 if config.deterministic else config.jobs):
        for epoch in range(config.epochs):
            opt.lr = lr_at(epoch, config.lr0, config.lr_halving)
            losses = []
            for _ in range(iters):
                if config.max_iters is not None and step >= config.max_iters:
                    break
                xb, yb = sample_patch_batch(frames, train_c, config, rng)
                opt.zero_grad()
                try:
                    loss = E.mse(forward_window(params, Tensor(xb)), Tensor(yb))
                    loss.backward()
                    opt.step()
                except E.NonFiniteError as exc:
                    raise TrainingError(f"non-finite value at epoch {epoch}, iteration {step}: {exc}") from exc
                losses.append(loss.item())
                step += 1
            if not losses:
                report.stop_reason = "max_iters"
                break
            report.lr.append(opt.lr)
            report.train_loss.append(float(np.mean(losses)))
            report.val_loss.append(_val_loss(params, val_stack) if val_stack is not None else report.train_loss[-1])
            report.epochs_run = epoch + 1
            log.info("epoch %d lr %.2e train %.6f val %.6f", epoch, opt.lr, report.train_loss[-1], report.val_loss[-1])
            if report.val_loss[-1] < best_val:
                best_val = report.val_loss[-1]
                best = params.copy()
                report.best_epoch = epoch
            if config.max_iters is not None and config.max_iters <= step < config.epochs * iters:
                report.stop_reason = "max_iters"
                break
            if early_stop_check(report.val_loss, config.patience) and epoch + 1 < config.epochs:
                report.stop_reason = "early_stop"
                break
        report.stop_reason = report.stop_reason or "completed"

    report.iterations = step
    report.wall_time_s = None if config.deterministic else time.perf_counter() - start
    return best, report


def _val_loss(params: ModelParams, val) -> float:
    xs, ys = val
    with E.no_grad():
        total = 0.0
        for i in range(0, len(xs), 8):
            out = forward_window(params, Tensor(xs[i : i + 8]))
            total += E.mse(out, Tensor(ys[i : i + 8])).item() * len(xs[i : i + 8])
    return total / len(xs)


# ---------------------------------------------------------------------------
# ablations

ABLATION_MODES = ("tf", "frames", "stride")


def ablation_conditions(mode: str, values=None) -> list[tuple[str, dict]]:
    if mode in ("tf", "tf_off"):
        return [("G+D", {"temporal_filter": False}), ("G+TF+D", {"temporal_filter": True})]
    if mode == "frames":
        return [(f"N={n}", {"n_frames": int(n)}) for n in (values or (3, 5, 7, 9, 11))]
    if mode == "stride":
        return [(f"stride={s}", {"temporal_stride": int(s)}) for s in (values or (1, 2, 4, 5))]
    raise ValueError(f"unknown ablation mode {mode!r}; expected one of {ABLATION_MODES}")


def ablate(
    noisy: np.ndarray,
    clean: np.ndarray,
    config: TrainConfig,
    mode: str,
    arch: ArchConfig | None = None,
    values=None,
    peak: float = 255.0,
    base_fps: float | None = None,
) -> dict:
    """Retrain per condition and score each against the clean reference."""
    rows = []
    for label, change in ablation_conditions(mode, values):
        cfg = replace(config, **change)
        params, rep = train(noisy, cfg, arch)
        den = denoise_video(params, noisy, jobs=cfg.jobs)
        score = evaluate_sequence(clean, den, peak=peak)
        row = {
            "label": label,
            "psnr_db": score.mean_psnr_db,
            "ssim": score.mean_ssim,
            "final_train_loss": rep.train_loss[-1],
            "epochs_run": rep.epochs_run,
            "iterations": rep.iterations,
            "stop_reason": rep.stop_reason,
        }
        if mode == "stride":
            s = change["temporal_stride"]
            row["fps"] = (base_fps / s) if base_fps else FPS_BY_STRIDE.get(s)
        row.update(change)
        rows.append(row)
    noisy_score = evaluate_sequence(clean, noisy, peak=peak)
    return {
        "mode": "tf" if mode == "tf_off" else mode,
        "rows": rows,
        "noisy_psnr_db": noisy_score.mean_psnr_db,
        "noisy_ssim": noisy_score.mean_ssim,
        "peak": peak,
        "config": config.to_dict(),
        "version": __version__,
    }


def render_table(report: dict) -> str:
    """Aligned text table: one row per condition plus the noisy-input baseline."""
    head = ["condition"] + (["fps"] if report["mode"] == "stride" else []) + ["PSNR", "SSIM", "train MSE"]
    lines = []
    for r in report["rows"]:
        cells = [r["label"]]
        if report["mode"] == "stride":
            cells.append(f"{r['fps']:g}" if r.get("fps") else "-")
        cells += [f"{r['psnr_db']:.2f}", f"{r['ssim']:.3f}", f"{r['final_train_loss']:.3e}"]
        lines.append(cells)
    lines.append(["noisy input"] + ([""] if report["mode"] == "stride" else []) + [f"{report['noisy_psnr_db']:.2f}", f"{report['noisy_ssim']:.3f}", ""])
    widths = [max(len(str(x)) for x in col) for col in zip(head, *lines)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    out = [fmt.format(*head), fmt.format(*("-" * w for w in widths))]
    out += [fmt.format(*cells) for cells in lines]
    return "\n".join(out)
