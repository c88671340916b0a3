"""Unsupervised video denoising with a temporal V-kernel over per-frame features."""

__version__ = "0.1.0"
