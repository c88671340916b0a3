import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tempoden.engine import Tensor
from tempoden.model import forward_window, model_init
from tempoden.videoio import (
    FormatError,
    FrameSequence,
    decode_checkpoint,
    decode_f32raw,
    decode_pnm,
    encode_checkpoint,
    encode_f32raw,
    encode_pnm,
    load_checkpoint,
    read_sequence,
    save_checkpoint,
    to_u8,
    write_sequence,
)


@pytest.mark.parametrize("x, u", [(0.0, 0), (1.0, 255), (0.5, 128), (-0.3, 0), (1.7, 255), (1 / 255, 1), (0.5 / 255, 1)])
def test_u8_rounding(x, u):
    assert to_u8(np.array([x]))[0] == u


def test_pgm_endpoints():
    data = b"P5\n# a comment\n2 1\n255\n" + bytes([255, 0])
    assert decode_pnm(data).ravel().tolist() == [1.0, 0.0]


@pytest.mark.parametrize("c", [1, 3])
def test_pnm_roundtrip_on_grid(rng, c):
    frame = rng.integers(0, 256, size=(c, 5, 7)).astype(np.float32) / 255
    back = decode_pnm(encode_pnm(frame))
    np.testing.assert_array_equal(to_u8(back), to_u8(frame))


@pytest.mark.parametrize("data", [b"P2\n1 1\n255\n0", b"P5\n2 2\n255\n\x00", b"P5\n1 1\n65535\n\x00\x00", b"P5\n1"])
def test_pnm_errors(data):
    with pytest.raises(FormatError):
        decode_pnm(data)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 3), st.integers(1, 6), st.integers(1, 6)), elements=st.floats(-1e6, 1e6, width=32)))
def test_f32raw_exact(frame):
    blob = encode_f32raw(frame)
    back = decode_f32raw(blob)
    assert back.tobytes() == frame.tobytes()
    assert encode_f32raw(back) == blob


def test_f32raw_truncated():
    blob = encode_f32raw(np.zeros((1, 2, 2), np.float32))
    with pytest.raises(FormatError):
        decode_f32raw(blob[:-1])


def test_sequence_roundtrip(tmp_path, rng):
    frames = (rng.random((3, 1, 4, 5)) * 3 - 1).astype(np.float32)
    write_sequence(FrameSequence(frames, fps=60.0, noise={"family": "gaussian", "level": 5, "seed": 1}), tmp_path / "s")
    back = read_sequence(tmp_path / "s" / "manifest.json")
    assert back.frames.tobytes() == frames.tobytes()
    assert back.fps == 60.0 and back.noise["level"] == 5
    write_sequence(back, tmp_path / "t")
    for f in (tmp_path / "s").iterdir():
        assert f.read_bytes() == (tmp_path / "t" / f.name).read_bytes()


def test_u8_sequence(tmp_path, rng):
    frames = rng.random((2, 3, 4, 4)).astype(np.float32)
    write_sequence(FrameSequence(frames), tmp_path, encoding="u8")
    assert (tmp_path / "frame_00000.ppm").exists()
    back = read_sequence(tmp_path)
    assert back.bit_depth == 8 and back.peak == 255
    np.testing.assert_array_equal(to_u8(back.frames), to_u8(frames))


def test_manifest_missing_file_named(tmp_path, rng):
    write_sequence(FrameSequence(rng.random((2, 1, 4, 4))), tmp_path)
    (tmp_path / "frame_00001.f32").unlink()
    with pytest.raises(FileNotFoundError, match="frame_00001.f32"):
        read_sequence(tmp_path)


def test_manifest_geometry_mismatch(tmp_path, rng):
    write_sequence(FrameSequence(rng.random((2, 1, 4, 4))), tmp_path)
    m = json.loads((tmp_path / "manifest.json").read_text())
    m["geometry"]["width"] = 5
    m["extra_key"] = "ignored"
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(FormatError, match="geometry"):
        read_sequence(tmp_path)


def test_manifest_bad_json(tmp_path):
    (tmp_path / "manifest.json").write_text("{nope")
    with pytest.raises(FormatError):
        read_sequence(tmp_path)


# -- checkpoints --------------------------------------------------------------


@pytest.fixture
def params(tiny_arch):
    return model_init(tiny_arch, 11)


def test_checkpoint_roundtrip(tmp_path, params, rng):
    report = {"train_loss": [0.5, 0.25], "version": "x"}
    save_checkpoint(params, report, tmp_path / "a.ckpt")
    loaded, rep = load_checkpoint(tmp_path / "a.ckpt")
    assert rep == report and loaded.arch == params.arch
    save_checkpoint(loaded, rep, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    x = Tensor(rng.random((1, 3, 8, 8)))
    assert forward_window(params, x).data.tobytes() == forward_window(loaded, x).data.tobytes()


def _split(blob):
    hlen = struct.unpack("<I", blob[8:12])[0]
    return json.loads(blob[12 : 12 + hlen]), blob[12 + hlen :]


def _join(header, payload):
    h = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return b"UVDN" + struct.pack("<II", 1, len(h)) + h + payload


def test_checkpoint_tampered_tensor_count(params):
    header, payload = _split(encode_checkpoint(params))
    header["tensors"].pop()
    with pytest.raises(FormatError, match="entries"):
        decode_checkpoint(_join(header, payload))


def test_checkpoint_tampered_shape(params):
    header, payload = _split(encode_checkpoint(params))
    header["tensors"][0]["shape"][0] += 1
    with pytest.raises(FormatError, match="conflicts"):
        decode_checkpoint(_join(header, payload))


@pytest.mark.parametrize("cut", [3, 11, 40, -4])
def test_checkpoint_truncated(params, cut):
    blob = encode_checkpoint(params)
    with pytest.raises(FormatError):
        decode_checkpoint(blob[:cut])


def test_checkpoint_bad_version(params):
    blob = bytearray(encode_checkpoint(params))
    blob[4] = 9
    with pytest.raises(FormatError, match="version"):
        decode_checkpoint(bytes(blob))


def test_atomic_write_leaves_no_temp(tmp_path, params):
    save_checkpoint(params, None, tmp_path / "m.ckpt")
    assert [p.name for p in tmp_path.iterdir()] == ["m.ckpt"]
