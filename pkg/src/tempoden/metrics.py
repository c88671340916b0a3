"""PSNR and SSIM scoring of denoised sequences against clean references."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(reference: np.ndarray, test: np.ndarray, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE); math.inf when the frames are identical."""
    reference = np.asarray(reference, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if reference.shape != test.shape:
        raise ValueError(f"psnr: shape mismatch {reference.shape} vs {test.shape}")
    if peak <= 0:
        raise ValueError(f"psnr: peak must be > 0, got {peak}")
    err = np.mean((reference - test) ** 2)
    if err == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / err)


def _gaussian_1d(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    n = g.size
    rows = sliding_window_view(img, n, axis=0) @ g
    return sliding_window_view(rows, n, axis=1) @ g


def _ssim_plane(x: np.ndarray, y: np.ndarray, peak: float) -> float:
    g = _gaussian_1d(SSIM_WINDOW, SSIM_SIGMA)
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    mx = _filter_valid(x, g)
    my = _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def ssim(reference: np.ndarray, test: np.ndarray, peak: float = 1.0) -> float:
    """Single-scale Gaussian SSIM (11x11, sigma 1.5), valid region only.

    Accepts (H, W) or (C, H, W); channels are scored separately and averaged.
    """
    x = np.asarray(reference, dtype=np.float64)
    y = np.asarray(test, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"ssim: shape mismatch {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x, y = x[None], y[None]
    if min(x.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(f"ssim: frame {x.shape[-2]}x{x.shape[-1]} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    return float(np.mean([_ssim_plane(a, b, peak) for a, b in zip(x, y)]))


@dataclass
class ScoreReport:
    psnr_db: list[float]
    ssim: list[float]
    peak: float
    mean_psnr_db: float = field(init=False)
    mean_ssim: float = field(init=False)

    def __post_init__(self):
        self.mean_psnr_db = float(np.mean(self.psnr_db)) if self.psnr_db else math.nan
        self.mean_ssim = float(np.mean(self.ssim)) if self.ssim else math.nan

    def to_dict(self) -> dict:
        return {
            "frames": [
                {"frame_index": i, "psnr_db": _encode(p), "ssim": s}
                for i, (p, s) in enumerate(zip(self.psnr_db, self.ssim))
            ],
            "mean_psnr_db": _encode(self.mean_psnr_db),
            "mean_ssim": self.mean_ssim,
            "peak": self.peak,
            "ssim_window": {"size": SSIM_WINDOW, "sigma": SSIM_SIGMA, "k1": SSIM_K1, "k2": SSIM_K2},
        }


def _encode(v: float):
    # JSON has no infinity; identical frames are reported as the string "inf"
    return "inf" if math.isinf(v) else v


def evaluate_sequence(clean: np.ndarray, test: np.ndarray, peak: float = 1.0) -> ScoreReport:
    """Per-frame PSNR/SSIM between two (T, C, H, W) sequences in [0, 1] units.

    ``peak`` selects the reporting scale: frames are multiplied by it, so
    peak=255 gives conventional 8-bit PSNR.
    """
    clean = np.asarray(clean, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if clean.shape[0] != test.shape[0]:
        raise ValueError(f"evaluate_sequence: length mismatch {clean.shape[0]} vs {test.shape[0]}")
    if clean.shape != test.shape:
        raise ValueError(f"evaluate_sequence: geometry mismatch {clean.shape[1:]} vs {test.shape[1:]}")
    ps, ss = [], []
    for a, b in zip(clean, test):
        a, b = a * peak, b * peak
        ps.append(psnr(a, b, peak))
        ss.append(ssim(a, b, peak))
    return ScoreReport(ps, ss, float(peak))
