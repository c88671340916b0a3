"""Feature generator, temporal V-kernel and blind-spot U-Net denoiser.

Data flow for one window of N frames (frame-major channel stack)::

    frames (B, N*C_img, H, W)
      -> feature generator: 3 grouped convs, groups == N   -> F_1..F_N
      -> temporal filter:   F'_t = gamma_t * F_t            (gamma_c == 0)
      -> U-Net on concat(F'_1..F'_N)                         -> (B, C_out, H, W)

Because the central weight is exactly zero and the feature generator never
mixes frames, the output cannot depend on the central frame's pixels.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction

import numpy as np

from . import engine as E
from .engine import Tensor

DEFAULT_WIDTHS = {"enc": 48, "enc3_wide": 96, "dec": 96, "head": (384, 96)}


@dataclass(frozen=True)
class TemporalKernel:
    weights: tuple[float, ...]

    @property
    def M(self) -> int:
        return len(self.weights)

    @property
    def k(self) -> int:
        return self.M // 2

    @property
    def center(self) -> int:
        return self.k

    def as_array(self, dtype=np.float32) -> np.ndarray:
        return np.asarray(self.weights, dtype=dtype)


def temporal_kernel(M: int) -> TemporalKernel:
    """V-shaped weights |i - k| / k for i in 0..M-1, with k = M // 2.

    >>> temporal_kernel(5).weights
    (1.0, 0.5, 0.0, 0.5, 1.0)
    """
    if not isinstance(M, (int, np.integer)) or M < 3 or M % 2 == 0:
        raise ValueError(f"temporal_kernel: M must be an odd integer >= 3, got {M!r}")
    k = M // 2
    return TemporalKernel(tuple(float(Fraction(abs(i - k), k)) for i in range(M)))


def flat_kernel(M: int) -> TemporalKernel:
    """All-ones weights: the temporal filter switched off."""
    if M < 1 or M % 2 == 0:
        raise ValueError(f"flat_kernel: M must be odd and positive, got {M!r}")
    return TemporalKernel((1.0,) * M)


@dataclass(frozen=True)
class ArchConfig:
    """Architecture record; stored verbatim in checkpoints."""

    n_frames: int = 7
    image_channels: int = 1
    feature_channels: int = 16
    out_channels: int | None = None
    kernel_size: int = 3
    enc_width: int = DEFAULT_WIDTHS["enc"]
    enc3_wide_width: int = DEFAULT_WIDTHS["enc3_wide"]
    dec_width: int = DEFAULT_WIDTHS["dec"]
    head_widths: tuple[int, int] = DEFAULT_WIDTHS["head"]
    temporal_filter: bool = True
    temporal_stride: int = 1

    def __post_init__(self):
        if self.out_channels is None:
            object.__setattr__(self, "out_channels", self.image_channels)
        object.__setattr__(self, "head_widths", tuple(int(w) for w in self.head_widths))
        if self.n_frames < 3 or self.n_frames % 2 == 0:
            raise ValueError(f"n_frames must be odd and >= 3, got {self.n_frames}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd and positive, got {self.kernel_size}")
        if self.temporal_stride < 1:
            raise ValueError(f"temporal_stride must be >= 1, got {self.temporal_stride}")
        if len(self.head_widths) != 2:
            raise ValueError(f"head_widths must have two entries, got {self.head_widths}")
        for name in ("image_channels", "feature_channels", "out_channels", "enc_width", "enc3_wide_width", "dec_width"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if min(self.head_widths) < 1:
            raise ValueError(f"head_widths must be positive, got {self.head_widths}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["head_widths"] = list(self.head_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown architecture keys: {sorted(unknown)}")
        return cls(**d)

    def kernel(self) -> TemporalKernel:
        return temporal_kernel(self.n_frames) if self.temporal_filter else flat_kernel(self.n_frames)

    def layer_shapes(self) -> list[tuple[str, tuple[int, int, int, int], int]]:
        """Ordered (name, weight shape, groups) for every conv in the model."""
        n, ci, cf, k = self.n_frames, self.image_channels, self.feature_channels, self.kernel_size
        e, e3, d = self.enc_width, self.enc3_wide_width, self.dec_width
        h1, h2 = self.head_widths
        stack = n * cf
        return [
            ("fg.0", (n * cf, ci, k, k), n),
            ("fg.1", (n * cf, cf, k, k), n),
            ("fg.2", (n * cf, cf, k, k), n),
            ("enc1.0", (e, stack, k, k), 1),
            ("enc1.1", (e, e, k, k), 1),
            ("enc1.2", (e, e, k, k), 1),
            ("enc2.0", (e, e, k, k), 1),
            ("enc2.1", (e, e, k, k), 1),
            ("enc2.2", (e, e, k, k), 1),
            ("enc3.0", (e3, e, k, k), 1),
            ("enc3.1", (e3, e3, k, k), 1),
            ("enc3.2", (e, e3, k, k), 1),
            ("dec1.0", (d, e + e, k, k), 1),
            ("dec1.1", (d, d, k, k), 1),
            ("dec1.2", (d, d, k, k), 1),
            ("dec2.0", (d, d + stack, k, k), 1),
            ("dec2.1", (d, d, k, k), 1),
            ("dec2.2", (d, d, k, k), 1),
            ("head.0", (h1, d, 1, 1), 1),
            ("head.1", (h2, h1, 1, 1), 1),
            ("head.2", (self.out_channels, h2, 1, 1), 1),
        ]


@dataclass
class ModelParams:
    arch: ArchConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def count(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, {k: Tensor(v.data, requires_grad=v.requires_grad, dtype=v.dtype) for k, v in self.tensors.items()})


def model_init(arch: ArchConfig, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    tensors = {name: E.init_conv_weight(shape, rng) for name, shape, _ in arch.layer_shapes()}
    return ModelParams(arch, tensors)


# ---------------------------------------------------------------------------
# forward pieces


def _conv(params: ModelParams, name: str, x: Tensor, groups: int = 1) -> Tensor:
    w = params.tensors[name]
    return E.conv2d(x, w, stride=1, pad=w.shape[-1] // 2, groups=groups)


def feature_generate(params: ModelParams, window: Tensor) -> list[Tensor]:
    """Per-frame feature maps from a (B, N*C_img, H, W) window stack.

    Returns N tensors of shape (B, C_f, H, W); map j depends only on frame j.
    """
    arch = params.arch
    E._as4(window, "feature_generate")
    expect = arch.n_frames * arch.image_channels
    if window.shape[1] != expect:
        raise E.ShapeError(
            f"feature_generate: window has {window.shape[1]} channels, expected "
            f"n_frames*image_channels = {arch.n_frames}*{arch.image_channels} = {expect}"
        )
    n = arch.n_frames
    h = E.relu(_conv(params, "fg.0", window, groups=n))
    h = E.relu(_conv(params, "fg.1", h, groups=n))
    h = _conv(params, "fg.2", h, groups=n)
    cf = arch.feature_channels
    return [E.slice_channels(h, j * cf, (j + 1) * cf) for j in range(n)]


def apply_temporal_filter(features: list[Tensor], kernel: TemporalKernel) -> list[Tensor]:
    if len(features) != kernel.M:
        raise E.ShapeError(f"apply_temporal_filter: {len(features)} feature maps but kernel has M={kernel.M}")
    return [E.scale(f, g) for f, g in zip(features, kernel.weights)]


def denoise_forward(params: ModelParams, weighted: list[Tensor] | Tensor) -> Tensor:
    """U-Net over the concatenated weighted features; returns (B, C_out, H, W)."""
    x0 = E.concat_many(weighted) if isinstance(weighted, (list, tuple)) else weighted
    arch = params.arch
    stack = arch.n_frames * arch.feature_channels
    if x0.shape[1] != stack:
        raise E.ShapeError(f"denoise_forward: input has {x0.shape[1]} channels, expected {stack}")
    h, w = x0.shape[2:]
    if h % 4 or w % 4:
        raise E.ShapeError(f"denoise_forward: H and W must be multiples of 4, got {h}x{w}")

    def block(prefix: str, x: Tensor) -> Tensor:
        for i in range(3):
            x = E.relu(_conv(params, f"{prefix}.{i}", x))
        return x

    e1 = E.maxpool2(block("enc1", x0))
    e2 = E.maxpool2(block("enc2", e1))
    e3 = block("enc3", e2)
    d1 = block("dec1", E.concat_channels(E.upsample_nearest2(e3), e1))
    d2 = block("dec2", E.concat_channels(E.upsample_nearest2(d1), x0))
    y = E.relu(_conv(params, "head.0", d2))
    y = E.relu(_conv(params, "head.1", y))
    return _conv(params, "head.2", y)


def forward_window(params: ModelParams, window: Tensor, kernel: TemporalKernel | None = None) -> Tensor:
    """Full pipeline on a window stack: features -> filter -> U-Net."""
    kernel = kernel or params.arch.kernel()
    feats = feature_generate(params, window)
    return denoise_forward(params, apply_temporal_filter(feats, kernel))


# ---------------------------------------------------------------------------
# sequence-level inference


def window_indices(t: int, T: int, n_frames: int, stride: int = 1) -> list[int]:
    """Source frame for each window slot, centred on t.

    Out-of-range slots take the frame at the same temporal distance on the
    opposite side of t. If both sides are out of range the slot is clamped
    to the sequence end on its own side, or the other end when that end is t.
    Frame t therefore fills only the centre slot whenever T >= 2.
    """
    if not 0 <= t < T:
        raise IndexError(f"frame index {t} out of range for sequence of length {T}")
    k = n_frames // 2
    out = []
    for i in range(-k, k + 1):
        d = i * stride
        if 0 <= t + d < T:
            out.append(t + d)
        elif 0 <= t - d < T:
            out.append(t - d)
        else:
            j = min(max(t + d, 0), T - 1)
            if j == t:
                j = min(max(t - d, 0), T - 1)
            out.append(j)
    return out


def _pad_to4(frames: np.ndarray) -> tuple[np.ndarray, int, int]:
    h, w = frames.shape[-2:]
    ph, pw = (-h) % 4, (-w) % 4
    if ph or pw:
        mode = "reflect" if min(h, w) > max(ph, pw) else "edge"
        frames = np.pad(frames, [(0, 0)] * (frames.ndim - 2) + [(0, ph), (0, pw)], mode=mode)
    return frames, h, w


def build_window(frames: np.ndarray, t: int, n_frames: int, stride: int = 1) -> np.ndarray:
    """(T, C, H, W) -> (N*C, H, W) stack for the window centred at t."""
    idx = window_indices(t, frames.shape[0], n_frames, stride)
    return np.concatenate([frames[i] for i in idx], axis=0)


def pipeline_denoise_frame(params: ModelParams, frames: np.ndarray, t: int, kernel: TemporalKernel | None = None) -> np.ndarray:
    """Denoise frame t of a (T, C, H, W) float array; returns (C_out, H, W)."""
    return _denoise_batch(params, frames, [t], kernel)[0]


def _denoise_batch(params: ModelParams, frames: np.ndarray, ts: list[int], kernel: TemporalKernel | None) -> np.ndarray:
    arch = params.arch
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[1] != arch.image_channels:
        raise E.ShapeError(f"expected frames of shape (T, {arch.image_channels}, H, W), got {frames.shape}")
    dtype = params.tensors["fg.0"].dtype
    stack = np.stack([build_window(frames, t, arch.n_frames, arch.temporal_stride) for t in ts])
    stack, h, w = _pad_to4(stack.astype(dtype, copy=False))
    with E.no_grad():
        out = forward_window(params, Tensor(stack, dtype=dtype), kernel)
    return out.data[:, :, :h, :w]


def denoise_video(params: ModelParams, frames: np.ndarray, batch: int = 4, jobs: int = 1) -> np.ndarray:
    """Denoise every frame of a (T, C, H, W) sequence at full resolution."""
    frames = np.asarray(frames)
    T = frames.shape[0] if frames.ndim == 4 else 0
    if T < 1:
        raise ValueError("denoise_video: empty sequence")
    chunks = [list(range(s, min(s + batch, T))) for s in range(0, T, batch)]
    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as ex:
            parts = list(ex.map(lambda c: _denoise_batch(params, frames, c, None), chunks))
    else:
        parts = [_denoise_batch(params, frames, c, None) for c in chunks]
    return np.concatenate(parts, axis=0)
