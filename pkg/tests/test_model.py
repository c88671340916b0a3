from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tempoden import engine as E
from tempoden.engine import Tensor
from tempoden.model import (
    ArchConfig,
    apply_temporal_filter,
    build_window,
    denoise_forward,
    denoise_video,
    feature_generate,
    flat_kernel,
    forward_window,
    model_init,
    pipeline_denoise_frame,
    temporal_kernel,
    window_indices,
)


def closed_form_count(n, ci, cf, co, e=48, e3=96, d=96, h1=384, h2=96, k=3):
    kk = k * k
    feat = n * cf * ci * kk + 2 * n * cf * cf * kk
    enc = e * n * cf * kk + 5 * e * e * kk + e3 * e * kk + e3 * e3 * kk + e * e3 * kk
    dec = d * 2 * e * kk + d * (d + n * cf) * kk + 4 * d * d * kk
    head = h1 * d + h2 * h1 + co * h2
    return feat + enc + dec + head


# -- temporal kernel ----------------------------------------------------------


@pytest.mark.parametrize(
    "M, expected",
    [
        (3, [1, 0, 1]),
        (5, [1, Fraction(1, 2), 0, Fraction(1, 2), 1]),
        (7, [1, Fraction(2, 3), Fraction(1, 3), 0, Fraction(1, 3), Fraction(2, 3), 1]),
    ],
)
def test_kernel_table(M, expected):
    got = temporal_kernel(M).as_array()
    np.testing.assert_array_equal(got, np.array([float(v) for v in expected], dtype=np.float32))


@pytest.mark.parametrize("M", range(3, 16, 2))
def test_kernel_invariants(M):
    g = temporal_kernel(M).as_array(np.float64)
    assert g[M // 2] == 0 and g[0] == 1 and g[-1] == 1
    np.testing.assert_array_equal(g, g[::-1])
    assert np.all(np.diff(g[: M // 2 + 1]) < 0)


@pytest.mark.parametrize("M", [0, 1, 2, 4, -3])
def test_kernel_rejects_bad_sizes(M):
    with pytest.raises(ValueError):
        temporal_kernel(M)


def test_flat_kernel():
    assert flat_kernel(7).as_array().tolist() == [1.0] * 7


# -- architecture ---------------------------------------------------------------


@pytest.mark.parametrize("n, ci, cf", [(7, 1, 8), (7, 1, 16), (3, 3, 4), (11, 1, 8)])
def test_param_count_closed_form(n, ci, cf):
    arch = ArchConfig(n_frames=n, image_channels=ci, feature_channels=cf)
    assert model_init(arch, 0).count() == closed_form_count(n, ci, cf, ci)


def test_default_desk_count():
    assert model_init(ArchConfig(feature_channels=8), 0).count() == 922_200


def test_arch_roundtrip_and_unknown_keys():
    arch = ArchConfig(n_frames=5, feature_channels=4)
    assert ArchConfig.from_dict(arch.to_dict()) == arch
    with pytest.raises(ValueError):
        ArchConfig.from_dict({"n_frame": 5})


def test_init_seeding(tiny_arch):
    a, b, c = model_init(tiny_arch, 5), model_init(tiny_arch, 5), model_init(tiny_arch, 6)
    for k in a.tensors:
        np.testing.assert_array_equal(a.tensors[k].data, b.tensors[k].data)
    assert any(not np.array_equal(a.tensors[k].data, c.tensors[k].data) for k in a.tensors)


# -- feature generator / filter / U-Net -----------------------------------------


def test_features_are_per_frame(tiny_arch, rng):
    params = model_init(tiny_arch, 1)
    x = rng.random((1, 3, 8, 8))
    base = feature_generate(params, Tensor(x))
    x2 = x.copy()
    x2[:, 2] = rng.random((8, 8))
    moved = feature_generate(params, Tensor(x2))
    np.testing.assert_array_equal(base[0].data, moved[0].data)
    np.testing.assert_array_equal(base[1].data, moved[1].data)
    assert not np.array_equal(base[2].data, moved[2].data)


def test_zero_window_zero_features(tiny_arch):
    feats = feature_generate(model_init(tiny_arch, 1), Tensor(np.zeros((1, 3, 8, 8))))
    assert all(not f.data.any() for f in feats)


def test_filter_values(rng):
    feats = [Tensor(np.ones((1, 2, 4, 4))) for _ in range(7)]
    out = apply_temporal_filter(feats, temporal_kernel(7))
    np.testing.assert_allclose([o.data[0, 0, 0, 0] for o in out], [1, 2 / 3, 1 / 3, 0, 1 / 3, 2 / 3, 1], rtol=1e-6)
    rand = [Tensor(rng.normal(size=(1, 2, 4, 4))) for _ in range(7)]
    out = apply_temporal_filter(rand, temporal_kernel(7))
    assert not out[3].data.any()
    np.testing.assert_array_equal(out[0].data, rand[0].data)
    np.testing.assert_array_equal(out[6].data, rand[6].data)


@pytest.mark.parametrize("size", [16, 32])
def test_unet_shape_and_finiteness(tiny_arch, rng, size):
    params = model_init(tiny_arch, 2)
    out = forward_window(params, Tensor(rng.random((2, 3, size, size))))
    assert out.shape == (2, 1, size, size)
    assert np.isfinite(out.data).all()


def test_unet_zero_in_zero_out(tiny_arch):
    params = model_init(tiny_arch, 2)
    assert not denoise_forward(params, Tensor(np.zeros((1, 6, 8, 8)))).data.any()


def test_unet_rejects_non_multiple_of_four(tiny_arch):
    with pytest.raises(E.ShapeError):
        denoise_forward(model_init(tiny_arch, 2), Tensor(np.zeros((1, 6, 6, 8))))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.sampled_from([3, 5]), mode=st.sampled_from(["zeros", "random", "huge"]))
def test_blind_spot_window(seed, n, mode):
    arch = ArchConfig(n_frames=n, feature_channels=2, enc_width=4, enc3_wide_width=6, dec_width=6, head_widths=(8, 6))
    r = np.random.default_rng(seed)
    params = model_init(arch, seed)
    x = r.random((1, n, 8, 8))
    y = x.copy()
    c = n // 2
    y[:, c] = {"zeros": 0.0, "random": r.random((8, 8)), "huge": 1e6}[mode]
    with E.no_grad():
        a = forward_window(params, Tensor(x)).data
        b = forward_window(params, Tensor(y)).data
    assert a.tobytes() == b.tobytes()


def test_tf_off_sees_center(tiny_arch, rng):
    from dataclasses import replace

    params = model_init(replace(tiny_arch, temporal_filter=False), 4)
    x = rng.random((1, 3, 8, 8))
    y = x.copy()
    y[:, 1] = 0
    assert not np.array_equal(forward_window(params, Tensor(x)).data, forward_window(params, Tensor(y)).data)


# -- windows and sequence inference ----------------------------------------------


def test_window_indices():
    assert window_indices(10, 30, 7) == list(range(7, 14))
    assert window_indices(0, 30, 7) == [3, 2, 1, 0, 1, 2, 3]
    assert window_indices(40, 60, 7, stride=4) == [28, 32, 36, 40, 44, 48, 52]
    assert window_indices(0, 1, 7) == [0] * 7


@settings(max_examples=200, deadline=None)
@given(T=st.integers(1, 40), n=st.sampled_from([3, 5, 7, 9, 11]), s=st.integers(1, 5), data=st.data())
def test_window_indices_properties(T, n, s, data):
    t = data.draw(st.integers(0, T - 1))
    idx = window_indices(t, T, n, s)
    assert len(idx) == n and idx[n // 2] == t
    assert all(0 <= i < T for i in idx)
    if T >= 2:
        # the centre frame appears only in the centre slot
        assert idx.count(t) == 1


def test_build_window_stacks_channels(rng):
    frames = rng.random((9, 3, 4, 4))
    w = build_window(frames, 4, 3)
    np.testing.assert_array_equal(w[3:6], frames[4])
    assert w.shape == (9, 4, 4)


def test_denoise_video_geometry_and_determinism(tiny_arch, clean_clip):
    params = model_init(tiny_arch, 7)
    frames = clean_clip[:, :, :13, :14]  # forces padding to multiples of 4
    a = denoise_video(params, frames, batch=3)
    b = denoise_video(params, frames, batch=5, jobs=2)
    assert a.shape == frames.shape
    assert a.tobytes() == b.tobytes()


def test_denoise_single_frame(tiny_arch, rng):
    params = model_init(tiny_arch, 7)
    out = denoise_video(params, rng.random((1, 1, 8, 8)).astype(np.float32))
    assert out.shape == (1, 1, 8, 8)


@pytest.mark.parametrize("t", [0, 1, 5, 11])
def test_sequence_blind_spot(tiny_arch, clean_clip, rng, t):
    params = model_init(tiny_arch, 8)
    frames = clean_clip.copy()
    base = pipeline_denoise_frame(params, frames, t)
    frames[t] = rng.random(frames[t].shape)
    assert pipeline_denoise_frame(params, frames, t).tobytes() == base.tobytes()


def test_frame_channel_mismatch(tiny_arch, rng):
    with pytest.raises(E.ShapeError):
        pipeline_denoise_frame(model_init(tiny_arch, 0), rng.random((4, 3, 8, 8)), 1)
