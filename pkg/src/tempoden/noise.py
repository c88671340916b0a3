"""Seeded synthetic corruption: Gaussian, Poisson and impulse noise.

Every frame draws from its own Philox counter-based stream keyed by
``(seed, frame_index)``, so a frame's noise does not depend on which other
frames were corrupted, or in what order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FAMILIES = ("gaussian", "poisson", "impulse")
_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class NoiseSpec:
    family: str
    level: float
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown noise family {self.family!r}; expected one of {FAMILIES}")
        level = float(self.level)
        if not math.isfinite(level):
            raise ValueError(f"noise level must be finite, got {self.level}")
        if self.family == "impulse":
            if not 0.0 < level < 1.0:
                raise ValueError(f"impulse pixel ratio must be in (0, 1), got {level}")
        elif level <= 0.0:
            raise ValueError(f"{self.family} level must be > 0, got {level}")
        if not isinstance(self.seed, (int, np.integer)):
            raise ValueError(f"seed must be an integer, got {self.seed!r}")

    def to_dict(self) -> dict:
        level = float(self.level)
        return {"family": self.family, "level": int(level) if level.is_integer() else level, "seed": int(self.seed)}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSpec":
        return cls(family=d["family"], level=d["level"], seed=int(d["seed"]))


def frame_rng(seed: int, frame_index: int) -> np.random.Generator:
    """Philox stream for one frame of a materialized dataset."""
    return np.random.Generator(np.random.Philox(key=[int(seed) & _MASK64, int(frame_index) & _MASK64]))


def add_gaussian(frame: np.ndarray, sigma_8bit: float, rng: np.random.Generator) -> np.ndarray:
    """x + N(0, (sigma/255)^2), unclipped."""
    if not sigma_8bit > 0:
        raise ValueError(f"gaussian sigma must be > 0, got {sigma_8bit}")
    frame = np.asarray(frame, dtype=np.float64)
    return frame + rng.standard_normal(frame.shape) * (sigma_8bit / 255.0)


def add_poisson(frame: np.ndarray, lam: float, rng: np.random.Generator) -> np.ndarray:
    """Poisson(lam * x) / lam; lam is the event count at full intensity."""
    if not lam > 0:
        raise ValueError(f"poisson lambda must be > 0, got {lam}")
    frame = np.asarray(frame, dtype=np.float64)
    if (frame < 0).any():
        raise ValueError("poisson noise requires non-negative pixel values")
    return rng.poisson(lam * frame) / lam


def add_impulse(frame: np.ndarray, alpha: float, rng: np.random.Generator) -> np.ndarray:
    """Replace each pixel with prob. alpha by 0 or 1 (all channels together)."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"impulse alpha must be in (0, 1), got {alpha}")
    frame = np.asarray(frame, dtype=np.float64)
    spatial = frame.shape[-2:]
    hit = rng.random(spatial) < alpha
    salt = rng.random(spatial) < 0.5
    out = frame.copy()
    out[..., hit] = salt[hit].astype(np.float64)
    return out


_APPLY = {"gaussian": add_gaussian, "poisson": add_poisson, "impulse": add_impulse}


def corrupt_frame(frame: np.ndarray, spec: NoiseSpec, frame_index: int) -> np.ndarray:
    return _APPLY[spec.family](frame, float(spec.level), frame_rng(spec.seed, frame_index))


def corrupt_sequence(frames: np.ndarray, spec: NoiseSpec) -> np.ndarray:
    """(T, C, H, W) clean frames -> float32 noisy frames."""
    return np.stack([corrupt_frame(f, spec, i) for i, f in enumerate(frames)]).astype(np.float32)


def materialize(clean, spec: NoiseSpec, out_dir: str | Path) -> Path:
    """Corrupt a clean sequence once and write it (f32raw + manifest) to disk."""
    from .videoio import FrameSequence, write_sequence

    noisy = corrupt_sequence(clean.frames, spec)
    seq = FrameSequence(noisy, bit_depth=32, fps=clean.fps, noise=spec.to_dict())
    return write_sequence(seq, out_dir, encoding="f32raw")
