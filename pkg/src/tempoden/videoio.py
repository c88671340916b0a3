"""On-disk formats: frame files, sequence manifests and model checkpoints.

Frames
    ``.pgm`` / ``.ppm``  binary P5 / P6, maxval 255 (8-bit, clipped on export)
    ``.f32``             16-byte header ``b"FR32"`` + u32 C, H, W (little endian),
                         then C*H*W little-endian float32 values

Checkpoint
    ``b"UVDN"`` + u32 version + u32 header length + JSON header
    (architecture, report, ordered tensor table) + concatenated
    little-endian float32 payloads in table order.

All writers go through a temp file + ``os.replace`` so a crash never leaves a
half-written artifact under the final name.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine import Tensor
from .model import ArchConfig, ModelParams

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
F32_MAGIC = b"FR32"
CKPT_MAGIC = b"UVDN"
CKPT_VERSION = 1
ENCODINGS = ("u8", "f32raw")


class FormatError(ValueError):
    """Malformed, truncated or inconsistent file contents."""


@dataclass
class FrameSequence:
    frames: np.ndarray  # (T, C, H, W) float32
    bit_depth: int = 32
    fps: float | None = None
    noise: dict | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4:
            raise ValueError(f"FrameSequence: frames must be (T, C, H, W), got {self.frames.shape}")

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def geometry(self) -> tuple[int, int, int]:
        return tuple(self.frames.shape[1:])

    @property
    def peak(self) -> float:
        return 255.0 if self.bit_depth == 8 else 1.0


def atomic_write(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# frame codecs


def to_u8(frame: np.ndarray) -> np.ndarray:
    """Clip to [0, 1] and round half up onto 0..255."""
    x = np.clip(np.asarray(frame, dtype=np.float64), 0.0, 1.0)
    return np.floor(x * 255.0 + 0.5).astype(np.uint8)


def encode_pnm(frame: np.ndarray) -> bytes:
    """(C, H, W) float frame -> P5 (C=1) or P6 (C=3) bytes."""
    c, h, w = frame.shape
    if c not in (1, 3):
        raise FormatError(f"PGM/PPM needs 1 or 3 channels, got {c}")
    u8 = to_u8(frame)
    magic = b"P5" if c == 1 else b"P6"
    body = u8[0] if c == 1 else u8.transpose(1, 2, 0)
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(body).tobytes()


def decode_pnm(data: bytes, name: str = "<bytes>") -> np.ndarray:
    """P5/P6 bytes (maxval 255) -> (C, H, W) float32 in [0, 1]."""
    if data[:2] not in (b"P5", b"P6"):
        raise FormatError(f"{name}: not a binary PGM/PPM (magic {data[:2]!r})")
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{name}: truncated header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace before raster
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise FormatError(f"{name}: corrupt header {tokens!r}") from exc
    if maxval != 255:
        raise FormatError(f"{name}: only maxval 255 is supported, got {maxval}")
    c = 1 if data[:2] == b"P5" else 3
    need = w * h * c
    raster = data[pos : pos + need]
    if len(raster) != need:
        raise FormatError(f"{name}: raster has {len(raster)} bytes, expected {need}")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, c).transpose(2, 0, 1)
    return arr.astype(np.float32) / np.float32(255.0)


def encode_f32raw(frame: np.ndarray) -> bytes:
    c, h, w = frame.shape
    return F32_MAGIC + struct.pack("<III", c, h, w) + np.ascontiguousarray(frame, dtype="<f4").tobytes()


def decode_f32raw(data: bytes, name: str = "<bytes>") -> np.ndarray:
    if len(data) < 16 or data[:4] != F32_MAGIC:
        raise FormatError(f"{name}: bad f32raw magic")
    c, h, w = struct.unpack("<III", data[4:16])
    need = 4 * c * h * w
    if len(data) - 16 != need:
        raise FormatError(f"{name}: payload has {len(data) - 16} bytes, expected {need} for {c}x{h}x{w}")
    return np.frombuffer(data, dtype="<f4", offset=16).reshape(c, h, w).astype(np.float32)


# ---------------------------------------------------------------------------
# sequences


def write_sequence(seq: FrameSequence, out_dir: str | Path, encoding: str = "f32raw") -> Path:
    if encoding not in ENCODINGS:
        raise ValueError(f"unknown encoding {encoding!r}; expected one of {ENCODINGS}")
    out_dir = Path(out_dir)
    c, h, w = seq.geometry
    if encoding == "u8":
        ext = ".pgm" if c == 1 else ".ppm"
        enc, depth = encode_pnm, 8
    else:
        ext, enc, depth = ".f32", encode_f32raw, 32
    names = []
    for i, frame in enumerate(seq.frames):
        name = f"frame_{i:05d}{ext}"
        atomic_write(out_dir / name, enc(frame))
        names.append(name)
    manifest = {
        "format_version": MANIFEST_VERSION,
        "frames": names,
        "geometry": {"channels": c, "height": h, "width": w},
        "bit_depth": depth,
        "encoding": encoding,
        "noise": seq.noise,
        "fps": seq.fps,
    }
    path = out_dir / MANIFEST_NAME
    atomic_write(path, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    return path


def _manifest_path(path: str | Path) -> Path:
    path = Path(path)
    return path / MANIFEST_NAME if path.is_dir() else path


def read_manifest(path: str | Path) -> dict:
    path = _manifest_path(path)
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"sequence manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid manifest JSON ({exc})") from exc
    for key in ("frames", "geometry", "encoding"):
        if key not in manifest:
            raise FormatError(f"{path}: manifest missing required key {key!r}")
    if manifest["encoding"] not in ENCODINGS:
        raise FormatError(f"{path}: unknown encoding {manifest['encoding']!r}")
    return manifest


def read_sequence(path: str | Path) -> FrameSequence:
    mpath = _manifest_path(path)
    manifest = read_manifest(mpath)
    geo = manifest["geometry"]
    expect = (int(geo["channels"]), int(geo["height"]), int(geo["width"]))
    decode = decode_f32raw if manifest["encoding"] == "f32raw" else decode_pnm
    frames = []
    for name in manifest["frames"]:
        fpath = mpath.parent / name
        if not fpath.is_file():
            raise FileNotFoundError(f"manifest {mpath} lists missing frame file {fpath}")
        arr = decode(fpath.read_bytes(), str(fpath))
        if arr.shape != expect:
            raise FormatError(f"{fpath}: geometry {arr.shape} does not match manifest {expect}")
        frames.append(arr)
    if not frames:
        raise FormatError(f"{mpath}: manifest lists no frames")
    depth = int(manifest.get("bit_depth", 8 if manifest["encoding"] == "u8" else 32))
    return FrameSequence(np.stack(frames), bit_depth=depth, fps=manifest.get("fps"), noise=manifest.get("noise"))


# ---------------------------------------------------------------------------
# checkpoints


def encode_checkpoint(params: ModelParams, report: dict | None = None) -> bytes:
    table = [{"name": k, "shape": list(t.shape)} for k, t in params.tensors.items()]
    header = {"arch": params.arch.to_dict(), "report": report, "tensors": table}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    payload = b"".join(np.ascontiguousarray(t.data, dtype="<f4").tobytes() for t in params.tensors.values())
    return CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(hbytes)) + hbytes + payload


def decode_checkpoint(data: bytes, name: str = "<bytes>") -> tuple[ModelParams, dict | None]:
    if len(data) < 12 or data[:4] != CKPT_MAGIC:
        raise FormatError(f"{name}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != CKPT_VERSION:
        raise FormatError(f"{name}: unsupported checkpoint version {version}")
    if len(data) < 12 + hlen:
        raise FormatError(f"{name}: truncated header")
    try:
        header = json.loads(data[12 : 12 + hlen])
        arch = ArchConfig.from_dict(header["arch"])
        table = header["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{name}: corrupt header ({exc})") from exc
    expected = [(n, s) for n, s, _ in arch.layer_shapes()]
    got = [(e["name"], tuple(e["shape"])) for e in table]
    if len(got) != len(expected):
        raise FormatError(f"{name}: tensor table has {len(got)} entries, architecture needs {len(expected)}")
    for (gn, gs), (en, es) in zip(got, expected):
        if gn != en or gs != es:
            raise FormatError(f"{name}: tensor {gn}{list(gs)} conflicts with architecture {en}{list(es)}")
    total = sum(int(np.prod(s)) for _, s in expected)
    payload = data[12 + hlen :]
    if len(payload) != 4 * total:
        raise FormatError(f"{name}: payload has {len(payload)} bytes, expected {4 * total}")
    flat = np.frombuffer(payload, dtype="<f4")
    tensors, off = {}, 0
    for n, s in expected:
        size = int(np.prod(s))
        tensors[n] = Tensor(flat[off : off + size].reshape(s), requires_grad=True, dtype=np.float32)
        off += size
    return ModelParams(arch, tensors), header.get("report")


def save_checkpoint(params: ModelParams, report: dict | None, path: str | Path) -> Path:
    atomic_write(path, encode_checkpoint(params, report))
    return Path(path)


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict | None]:
    path = Path(path)
    return decode_checkpoint(path.read_bytes(), str(path))
