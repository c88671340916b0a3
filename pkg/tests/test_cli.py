import json

import numpy as np
import pytest

from tempoden import __version__
from tempoden.cli import EXIT_IO, EXIT_NUMERIC, EXIT_USAGE, RunConfig, main
from tempoden.gradsuite import PIPELINE_NAME
from tempoden.videoio import FrameSequence, read_sequence, write_sequence

TINY_ARCH = {"feature_channels": 2, "enc_width": 4, "enc3_wide_width": 6, "dec_width": 6, "head_widths": [8, 6]}


@pytest.fixture
def workdir(tmp_path, clean_clip):
    write_sequence(FrameSequence(clean_clip, fps=120.0), tmp_path / "clean")
    cfg = {"train": {"n_frames": 3, "patch": 16, "batch": 2, "epochs": 2, "iters_per_epoch": 2}, "arch": TINY_ARCH}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    return tmp_path


def run(*argv):
    return main([str(a) for a in argv])


def corrupt(w, out, *extra):
    return run("corrupt", "--clean", w / "clean", "--noise", "gaussian", "--level", 30, "--out", w / out, *extra)


def test_corrupt_deterministic(workdir, capsys):
    assert corrupt(workdir, "a", "--seed", 7) == 0
    assert corrupt(workdir, "b", "--seed", 7) == 0
    assert capsys.readouterr().out.strip().endswith("manifest.json")
    for f in (workdir / "a").iterdir():
        assert f.read_bytes() == (workdir / "b" / f.name).read_bytes()


def test_corrupt_seed_env_fallback(workdir, monkeypatch):
    monkeypatch.setenv("TEMPODEN_SEED", "7")
    assert corrupt(workdir, "env") == 0
    assert read_sequence(workdir / "env").noise["seed"] == 7
    monkeypatch.setenv("TEMPODEN_SEED", "seven")
    assert corrupt(workdir, "bad") == EXIT_USAGE


def test_corrupt_impulse_out_of_range(workdir, capsys):
    code = run("corrupt", "--clean", workdir / "clean", "--noise", "impulse", "--level", 1.5, "--out", workdir / "x")
    assert code == EXIT_USAGE
    assert "(0, 1)" in capsys.readouterr().err
    assert not (workdir / "x").exists()


def test_corrupt_manifest_embeds_spec(workdir):
    assert run("corrupt", "--clean", workdir / "clean", "--noise", "poisson", "--level", 30, "--seed", 2, "--out", workdir / "p") == 0
    noise = json.loads((workdir / "p" / "manifest.json").read_text())["noise"]
    assert noise == {"family": "poisson", "level": 30, "seed": 2}


def test_usage_and_io_codes(workdir, capsys):
    assert run("nonsense") == EXIT_USAGE
    assert run("corrupt", "--clean", workdir / "clean") == EXIT_USAGE
    assert run("corrupt", "--clean", workdir / "missing", "--noise", "gaussian", "--level", 3, "--out", workdir / "o") == EXIT_IO
    (workdir / "clean" / "frame_00003.f32").write_bytes(b"junk")
    assert corrupt(workdir, "o2") == EXIT_IO
    assert "frame_00003" in capsys.readouterr().err


def test_train_denoise_evaluate(workdir, capsys):
    w = workdir
    assert corrupt(w, "noisy", "--seed", 1) == 0
    assert run("train", "--noisy", w / "noisy", "--config", w / "cfg.json", "--out", w / "m.ckpt", "--report", w / "r.json", "--deterministic") == 0
    rep = json.loads((w / "r.json").read_text())
    assert rep["version"] == __version__ and rep["config"]["n_frames"] == 3 and rep["arch"]["enc_width"] == 4
    assert rep["config"]["deterministic"] is True and rep["wall_time_s"] is None
    assert run("denoise", "--ckpt", w / "m.ckpt", "--noisy", w / "noisy", "--out", w / "den") == 0
    assert read_sequence(w / "den").T == read_sequence(w / "noisy").T
    assert run("evaluate", "--clean", w / "clean", "--test", w / "den", "--report", w / "e.json") == 0
    ev = json.loads((w / "e.json").read_text())
    assert len(ev["frames"]) == 12 and ev["version"] == __version__ and ev["config"]["peak"] == 255


def test_evaluate_self(workdir):
    assert run("evaluate", "--clean", workdir / "clean", "--test", workdir / "clean", "--report", workdir / "s.json") == 0
    rep = json.loads((workdir / "s.json").read_text())
    assert rep["mean_ssim"] == 1.0 and rep["mean_psnr_db"] == "inf"


def test_train_deterministic_bytes(workdir):
    w = workdir
    corrupt(w, "noisy", "--seed", 1)
    for tag in ("a", "b"):
        args = ["train", "--noisy", w / "noisy", "--config", w / "cfg.json", "--out", w / f"{tag}.ckpt", "--report", w / f"{tag}.json", "--deterministic"]
        assert run(*args) == 0
        assert run("denoise", "--ckpt", w / f"{tag}.ckpt", "--noisy", w / "noisy", "--out", w / f"den_{tag}") == 0
    assert (w / "a.ckpt").read_bytes() == (w / "b.ckpt").read_bytes()
    assert (w / "a.json").read_bytes() == (w / "b.json").read_bytes()
    for f in (w / "den_a").iterdir():
        assert f.read_bytes() == (w / "den_b" / f.name).read_bytes()


def test_flags_override_config(workdir):
    w = workdir
    corrupt(w, "noisy", "--seed", 1)
    assert run("train", "--noisy", w / "noisy", "--config", w / "cfg.json", "--out", w / "m.ckpt", "--report", w / "r.json", "--epochs", 1, "--seed", 9) == 0
    rep = json.loads((w / "r.json").read_text())
    assert rep["config"]["epochs"] == 1 and rep["config"]["seed"] == 9 and rep["epochs_run"] == 1


@pytest.mark.parametrize(
    "doc",
    [{"trian": {}}, {"train": {"lr": 1}}, {"arch": {"width": 3}}, {"paths": {"noisey": "x"}}, {"train": {"epochs": 500}}],
)
def test_config_rejects(workdir, doc):
    (workdir / "bad.json").write_text(json.dumps(doc))
    assert run("train", "--noisy", workdir / "clean", "--config", workdir / "bad.json", "--out", workdir / "m") == EXIT_USAGE


def test_config_paths_section(workdir):
    w = workdir
    corrupt(w, "noisy", "--seed", 1)
    cfg = json.loads((w / "cfg.json").read_text())
    cfg["paths"] = {"noisy": str(w / "noisy"), "out": str(w / "p.ckpt"), "report": str(w / "p.json")}
    (w / "cfg2.json").write_text(json.dumps(cfg))
    assert run("train", "--config", w / "cfg2.json") == 0
    assert (w / "p.ckpt").exists() and (w / "p.json").exists()
    assert RunConfig.from_dict(cfg).paths["out"].endswith("p.ckpt")


def test_numeric_failure_code(workdir):
    w = workdir
    big = np.full((8, 1, 16, 16), 3e38, np.float32)
    write_sequence(FrameSequence(big), w / "big")
    with pytest.warns(RuntimeWarning):
        code = run("train", "--noisy", w / "big", "--config", w / "cfg.json", "--out", w / "m.ckpt")
    assert code == EXIT_NUMERIC
    assert not (w / "m.ckpt").exists()


@pytest.mark.parametrize(
    "mode, labels",
    [
        ("frames", ["N=3", "N=5", "N=7", "N=9", "N=11"]),
        ("tf", ["G+D", "G+TF+D"]),
        ("stride", ["stride=1", "stride=2", "stride=4", "stride=5"]),
    ],
)
def test_ablate_rows(tmp_path, mode, labels, capsys):
    from tempoden.synth import translating_texture

    clean = translating_texture(n_frames=24, height=16, width=16, seed=4)
    write_sequence(FrameSequence(clean), tmp_path / "clean")
    assert corrupt(tmp_path, "noisy", "--seed", 3) == 0
    cfg = {"train": {"n_frames": 3, "patch": 16, "batch": 1, "epochs": 1, "iters_per_epoch": 1, "val_fraction": 0.0}, "arch": TINY_ARCH}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    code = run("ablate", "--mode", mode, "--noisy", tmp_path / "noisy", "--clean", tmp_path / "clean", "--config", tmp_path / "cfg.json", "--report", tmp_path / "a.json", "--table")
    assert code == 0
    rep = json.loads((tmp_path / "a.json").read_text())
    assert [r["label"] for r in rep["rows"]] == labels
    assert rep["version"] == __version__ and rep["arch"]["enc_width"] == 4 and rep["config"]["patch"] == 16
    if mode == "stride":
        assert [r["fps"] for r in rep["rows"]] == [120, 60, 30, 24]
    out = capsys.readouterr().out
    assert all(label in out for label in labels)


def test_gradcheck_default_passes(gradcheck_run):
    code, out, _ = gradcheck_run
    assert code == 0
    names = [line.split()[0] for line in out.strip().splitlines()]
    assert len(names) == len(set(names))
    assert PIPELINE_NAME in names and "conv2d" in names and "maxpool2" in names


@pytest.mark.parametrize("op", ["relu", "conv2d", "mse"])
def test_gradcheck_corrupted_op_fails(op, capsys):
    assert run("gradcheck", "--corrupt", op, "--ops-only") == EXIT_NUMERIC
    out = capsys.readouterr().out
    assert any(line.startswith(op) and "FAIL" in line for line in out.splitlines())


def test_gradcheck_unknown_corrupt_op():
    assert run("gradcheck", "--corrupt", "softmax", "--ops-only") == EXIT_USAGE
