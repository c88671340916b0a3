"""Synthetic clean test sequences with known motion."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter


def texture(height: int, width: int, rng: np.random.Generator, blur: tuple[float, ...] = (1.5, 4.0)) -> np.ndarray:
    """Multi-scale smooth random texture rescaled to [0.1, 0.9]."""
    img = np.zeros((height, width))
    for i, s in enumerate(blur):
        layer = gaussian_filter(rng.standard_normal((height, width)), s, mode="wrap")
        img += layer / layer.std() / (i + 1)
    img -= img.min()
    img /= img.max()
    return 0.1 + 0.8 * img


def translating_texture(
    n_frames: int = 60,
    height: int = 64,
    width: int = 64,
    velocity: tuple[int, int] = (0, 1),
    channels: int = 1,
    seed: int = 0,
) -> np.ndarray:
    """(T, C, H, W) crops sliding across a larger texture at integer px/frame."""
    rng = np.random.default_rng(seed)
    vy, vx = velocity
    big_h = height + abs(vy) * n_frames + 1
    big_w = width + abs(vx) * n_frames + 1
    planes = np.stack([texture(big_h, big_w, rng) for _ in range(channels)])
    y0 = abs(vy) * n_frames if vy < 0 else 0
    x0 = abs(vx) * n_frames if vx < 0 else 0
    frames = [planes[:, y0 + t * vy : y0 + t * vy + height, x0 + t * vx : x0 + t * vx + width] for t in range(n_frames)]
    return np.stack(frames).astype(np.float32)
