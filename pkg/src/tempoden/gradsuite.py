"""Finite-difference verification of every differentiable op and the pipeline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as E
from .engine import Tensor
from .model import ArchConfig, forward_window, model_init

TOLERANCE = {"f32": 1e-2, "f64": 1e-6}
STEP = {"f32": 1e-2, "f64": 1e-4}
# float32 rounding swamps difference quotients of the small pipeline
# gradients, so their oracle is always evaluated in float64
PIPELINE_STEP = 1e-2
PIPELINE_NAME = "pipeline[N=3,8x8]"

# narrow widths keep a full-parameter sweep of the pipeline cheap
TOY_ARCH = ArchConfig(
    n_frames=3,
    image_channels=1,
    feature_channels=2,
    enc_width=4,
    enc3_wide_width=6,
    dec_width=6,
    head_widths=(8, 6),
)


@dataclass
class CheckResult:
    op: str
    precision: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _spaced(rng: np.random.Generator, shape, gap: float) -> np.ndarray:
    """Values whose pairwise gaps and distance from 0 all exceed ``gap``."""
    n = int(np.prod(shape))
    vals = (np.arange(n) - n / 2 + 0.5) * 3 * gap
    vals += np.sign(vals) * 5 * gap
    return rng.permutation(vals).reshape(shape)


def _wrong_backward(fn):
    def wrapped(*args, **kwargs):
        out = fn(*args, **kwargs)
        return Tensor._wrap(out.data, out._op, (out,), lambda g: (g * 1.5,))

    return wrapped


def _op_cases(rng: np.random.Generator, eps: float):
    def target_like(out_shape):
        return Tensor(rng.normal(size=out_shape) + 2.0)

    def unary(fn, x):
        tgt = {}

        def build(a):
            out = fn(a)
            if "t" not in tgt:
                tgt["t"] = target_like(out.shape)
            return E.mse(out, tgt["t"])

        return build, [Tensor(x)]

    cases = {}
    w = rng.normal(size=(3, 2, 3, 3))
    cases["conv2d"] = lambda ops: unary(lambda a: ops["conv2d"](a, Tensor(w), pad=1), rng.normal(size=(1, 2, 4, 4)))
    cases["conv2d[weight]"] = lambda ops: unary(
        lambda b: ops["conv2d"](Tensor(x_cw), b, stride=2, pad=1), w.copy()
    )
    x_cw = rng.normal(size=(2, 2, 5, 5))
    wg = rng.normal(size=(4, 1, 3, 3))
    cases["conv2d[grouped]"] = lambda ops: unary(lambda a: ops["conv2d"](a, Tensor(wg), pad=1, groups=2), rng.normal(size=(1, 2, 4, 4)))
    cases["relu"] = lambda ops: unary(ops["relu"], _spaced(rng, (1, 2, 3, 3), eps))
    cases["maxpool2"] = lambda ops: unary(ops["maxpool2"], _spaced(rng, (1, 2, 4, 4), eps))
    cases["upsample_nearest2"] = lambda ops: unary(ops["upsample_nearest2"], rng.normal(size=(1, 2, 2, 3)))
    cases["scale"] = lambda ops: unary(lambda a: ops["scale"](a, 2.0 / 3.0), rng.normal(size=(1, 2, 3, 3)))
    cases["slice_channels"] = lambda ops: unary(lambda a: ops["slice_channels"](a, 1, 3), rng.normal(size=(1, 4, 2, 2)))

    def concat_case(ops):
        tgt = Tensor(rng.normal(size=(1, 5, 2, 2)))
        return (lambda a, b: E.mse(ops["concat_channels"](a, b), tgt)), [
            Tensor(rng.normal(size=(1, 2, 2, 2))),
            Tensor(rng.normal(size=(1, 3, 2, 2))),
        ]

    cases["concat_channels"] = concat_case

    def mse_case(ops):
        return (lambda a, b: ops["mse"](a, b)), [Tensor(rng.normal(size=(1, 1, 3, 3))), Tensor(rng.normal(size=(1, 1, 3, 3)))]

    cases["mse"] = mse_case
    return cases


def _pipeline_case(seed: int, arch: ArchConfig = TOY_ARCH, batch: int = 2, size: int = 8):
    """Toy pipeline loss as a function of every parameter.

    All values are float32-representable, so the same case can be evaluated
    in either precision and shares one float64 finite-difference oracle.
    """
    rng = np.random.default_rng([seed, 1])
    params = model_init(arch, int(rng.integers(2**31)))
    weights = [t.data.astype(np.float64) for t in params.parameters()]
    window = rng.random((batch, arch.n_frames * arch.image_channels, size, size)).astype(np.float32)
    target = rng.random((batch, arch.out_channels, size, size)).astype(np.float32)
    names = list(params.tensors)

    # constants are wrapped per call so the graph follows the active precision
    def build(*ws):
        for n, t in zip(names, ws):
            params.tensors[n] = t
        return E.mse(forward_window(params, Tensor(window)), Tensor(target))

    return build, weights


def pipeline_check(seed: int, precisions=("f32", "f64"), eps: float = PIPELINE_STEP) -> list[CheckResult]:
    build, weights = _pipeline_case(seed)
    with E.precision("f64"):
        numeric = E.numeric_gradients(build, [Tensor(w) for w in weights], eps)
    results = []
    for prec in precisions:
        with E.precision(prec):
            analytic = E.analytic_gradients(build, [Tensor(w) for w in weights])
        results.append(CheckResult(PIPELINE_NAME, prec, E.max_rel_error(analytic, numeric), TOLERANCE[prec]))
    return results


def run_suite(seed: int = 0, precisions=("f32", "f64"), corrupt: str | None = None, pipeline: bool = True) -> list[CheckResult]:
    """Check every op (and the toy pipeline) in each precision."""
    ops = {
        "conv2d": E.conv2d,
        "relu": E.relu,
        "maxpool2": E.maxpool2,
        "upsample_nearest2": E.upsample_nearest2,
        "concat_channels": E.concat_channels,
        "slice_channels": E.slice_channels,
        "scale": E.scale,
        "mse": E.mse,
    }
    if corrupt is not None:
        if corrupt not in ops:
            raise ValueError(f"unknown op {corrupt!r}; expected one of {sorted(ops)}")
        ops[corrupt] = _wrong_backward(ops[corrupt])
    results = []
    for prec in precisions:
        eps = STEP[prec]
        with E.precision(prec):
            rng = np.random.default_rng(seed)
            for name, make in _op_cases(rng, eps).items():
                build, inputs = make(ops)
                err = E.grad_check(build, inputs, eps=eps)
                results.append(CheckResult(name, prec, err, TOLERANCE[prec]))
    if pipeline:
        # the corrupted op is not wired into the model; the op rows catch it
        results += pipeline_check(seed, precisions)
    return results
