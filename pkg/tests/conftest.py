import numpy as np
import pytest

from tempoden.model import ArchConfig
from tempoden.synth import translating_texture


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_arch():
    """Narrow widths; same topology as the default network."""
    return ArchConfig(n_frames=3, feature_channels=2, enc_width=4, enc3_wide_width=6, dec_width=6, head_widths=(8, 6))


@pytest.fixture(scope="session")
def clean_clip():
    return translating_texture(n_frames=12, height=16, width=16, seed=3)


@pytest.fixture(scope="session")
def gradcheck_run():
    """One default-seed `tempoden gradcheck` run: (exit code, stdout, seconds)."""
    import contextlib
    import io
    import time

    from tempoden.cli import main

    buf = io.StringIO()
    t0 = time.perf_counter()
    with contextlib.redirect_stdout(buf):
        code = main(["gradcheck"])
    return code, buf.getvalue(), time.perf_counter() - t0
