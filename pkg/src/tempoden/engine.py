"""Dense NCHW tensors with reverse-mode differentiation and Adam.

Every op takes and returns :class:`Tensor` objects wrapping a numpy array.
When gradients are enabled, each output keeps its parents and a closure that
maps the upstream gradient to per-parent gradients; :func:`backward` walks the
graph in reverse topological order.

Precision is float32 by default. ``precision("f64")`` switches newly created
tensors to float64, which is what the gradient checks use to get sharp
finite-difference comparisons.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

_DTYPES = {"f32": np.float32, "f64": np.float64}
_state = {"dtype": np.float32}
_local = threading.local()


def grad_enabled() -> bool:
    return getattr(_local, "grad", True)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an op."""


class NonFiniteError(FloatingPointError):
    """Raised when an op produces or receives NaN/Inf."""


def default_dtype() -> type:
    return _state["dtype"]


def set_precision(name: str) -> None:
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _state["dtype"] = _DTYPES[name]


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    old = _state["dtype"]
    set_precision(name)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    old = grad_enabled()
    _local.grad = False
    try:
        yield
    finally:
        _local.grad = old


@contextlib.contextmanager
def record_activation_pattern() -> Iterator[list[bytes]]:
    """Collect the piecewise-linear branch taken by every relu/maxpool2 call."""
    old = getattr(_local, "pattern", None)
    _local.pattern = rec = []
    try:
        yield rec
    finally:
        _local.pattern = old


def _record(branch: np.ndarray) -> None:
    rec = getattr(_local, "pattern", None)
    if rec is not None:
        rec.append(branch.tobytes())


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{where}: non-finite values encountered")


class Tensor:
    """A float array plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or _state["dtype"], copy=True)
        _check_finite(arr, "Tensor")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"

    @classmethod
    def _wrap(cls, data: np.ndarray, op: str, parents, backward_fn) -> "Tensor":
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._op = op
        needs = grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        out._parents = tuple(parents) if needs else ()
        out._backward = backward_fn if needs else None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numel(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op}, requires_grad={self.requires_grad})"


def _as4(x: Tensor, op: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{op}: expected a 4-D NCHW tensor, got shape {x.shape}")


def _same_dtype(op: str, *ts: Tensor) -> None:
    dts = {t.data.dtype for t in ts}
    if len(dts) > 1:
        raise TypeError(f"{op}: mixed dtypes {sorted(map(str, dts))}")


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(C, H+2p, W+2p) -> (C, k, k, ho, wo) patch tensor for one sample."""
    c = xp.shape[0]
    cols = np.empty((c, k, k, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, pad: int = 0, groups: int = 1) -> Tensor:
    """Bias-free grouped 2-D cross-correlation with zero padding.

    ``weight`` has shape ``(out_ch, in_ch // groups, k, k)``; with
    ``groups == in_ch // c_per_group`` each group of input channels only
    feeds its own block of output channels.
    """
    _as4(x, "conv2d")
    _same_dtype("conv2d", x, weight)
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d: weight must be 4-D (out_ch, in_ch/groups, kh, kw), got {weight.shape}")
    n, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    if kh != kw:
        raise ShapeError(f"conv2d: only square kernels are supported, got kh={kh}, kw={kw}")
    if groups < 1 or c % groups:
        raise ShapeError(f"conv2d: in_ch={c} is not divisible by groups={groups}")
    if o % groups:
        raise ShapeError(f"conv2d: out_ch={o} is not divisible by groups={groups}")
    if cg != c // groups:
        raise ShapeError(f"conv2d: weight in_ch/groups={cg} but input gives in_ch/groups={c // groups}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} or pad={pad}")
    k = kh
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {h + 2 * pad}x{w + 2 * pad}")

    og = o // groups
    wmat = weight.data.reshape(groups, og, cg * k * k)
    out = np.empty((n, o, ho, wo), dtype=x.data.dtype)
    keep = grad_enabled() and (x.requires_grad or weight.requires_grad)
    saved = []

    if k == 1 and stride == 1 and pad == 0:
        xs = x.data.reshape(n, groups, cg, h * w)
        for b in range(n):
            out[b] = np.matmul(wmat, xs[b]).reshape(o, ho, wo)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
        for b in range(n):
            cols = _im2col(xp[b], k, stride, ho, wo).reshape(groups, cg * k * k, ho * wo)
            out[b] = np.matmul(wmat, cols).reshape(o, ho, wo)
            if keep:
                saved.append(cols)

    def backward_fn(g: np.ndarray):
        gg = g.reshape(n, groups, og, ho * wo)
        dx = dw = None
        if weight.requires_grad:
            dw = np.zeros_like(wmat)
            for b in range(n):
                cols = saved[b] if saved else xs[b]
                dw += np.matmul(gg[b], cols.transpose(0, 2, 1))
            dw = dw.reshape(weight.shape)
        if x.requires_grad:
            wt = wmat.transpose(0, 2, 1)
            if saved:
                dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.data.dtype)
                for b in range(n):
                    dcols = np.matmul(wt, gg[b]).reshape(c, k, k, ho, wo)
                    for i in range(k):
                        for j in range(k):
                            dxp[b, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, i, j]
                dx = dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp
            else:
                dx = np.matmul(wt[None], gg).reshape(n, c, h, w)
        return dx, dw

    return Tensor._wrap(out, "conv2d", (x, weight), backward_fn)


# ---------------------------------------------------------------------------
# pointwise and structural ops


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _record(np.packbits(mask))
    out = np.where(mask, x.data, np.zeros((), x.data.dtype))

    def backward_fn(g):
        return (np.where(mask, g, np.zeros((), g.dtype)),)

    return Tensor._wrap(out, "relu", (x,), backward_fn)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Ties route the gradient to the first maximum."""
    _as4(x, "maxpool2")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2: spatial dims must be even, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    _record(idx.astype(np.uint8))
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        d = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(d, idx[..., None], g[..., None], axis=-1)
        return (d.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return Tensor._wrap(np.ascontiguousarray(out), "maxpool2", (x,), backward_fn)


def upsample_nearest2(x: Tensor) -> Tensor:
    _as4(x, "upsample_nearest2")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward_fn(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return Tensor._wrap(out, "upsample_nearest2", (x,), backward_fn)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _as4(a, "concat_channels")
    _as4(b, "concat_channels")
    _same_dtype("concat_channels", a, b)
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"concat_channels: n/h/w mismatch between {a.shape} and {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def backward_fn(g):
        return g[:, :ca], g[:, ca:]

    return Tensor._wrap(out, "concat_channels", (a, b), backward_fn)


def concat_many(ts: Sequence[Tensor]) -> Tensor:
    """Channel concatenation of several tensors, in order."""
    if not ts:
        raise ShapeError("concat_many: nothing to concatenate")
    for t in ts:
        _as4(t, "concat_many")
    _same_dtype("concat_many", *ts)
    ref = ts[0].shape
    for t in ts[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeError(f"concat_many: n/h/w mismatch between {ref} and {t.shape}")
    bounds = np.cumsum([0] + [t.shape[1] for t in ts])
    out = np.concatenate([t.data for t in ts], axis=1)

    def backward_fn(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(ts)))

    return Tensor._wrap(out, "concat_channels", tuple(ts), backward_fn)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    _as4(x, "slice_channels")
    c = x.shape[1]
    if not 0 <= start <= stop <= c:
        raise ShapeError(f"slice_channels: [{start}:{stop}] out of range for {c} channels")
    out = np.ascontiguousarray(x.data[:, start:stop])

    def backward_fn(g):
        d = np.zeros(x.shape, dtype=g.dtype)
        d[:, start:stop] = g
        return (d,)

    return Tensor._wrap(out, "slice_channels", (x,), backward_fn)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    if not math.isfinite(s):
        raise NonFiniteError(f"scale: non-finite factor {s}")
    # s == 0 yields +0.0 everywhere; x * 0.0 would leave -0.0 for negative x
    with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError below
        out = np.zeros_like(x.data) if s == 0.0 else x.data * x.data.dtype.type(s)

    def backward_fn(g):
        return (np.zeros_like(g) if s == 0.0 else g * g.dtype.type(s),)

    return Tensor._wrap(out, "scale", (x,), backward_fn)


def flip_width(x: Tensor) -> Tensor:
    _as4(x, "flip_width")
    out = np.ascontiguousarray(x.data[..., ::-1])

    def backward_fn(g):
        return (np.ascontiguousarray(g[..., ::-1]),)

    return Tensor._wrap(out, "flip_width", (x,), backward_fn)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error, accumulated and returned in float64."""
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data.astype(np.float64) - target.data.astype(np.float64)
    numel = diff.size
    out = np.array(np.mean(diff * diff), dtype=np.float64)

    def backward_fn(g):
        common = (2.0 * float(g) / numel) * diff
        gp = common.astype(pred.data.dtype) if pred.requires_grad else None
        gt = (-common).astype(target.data.dtype) if target.requires_grad else None
        return gp, gt

    return Tensor._wrap(out, "mse", (pred, target), backward_fn)


# ---------------------------------------------------------------------------
# reverse pass


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                g = np.asarray(g, dtype=node.data.dtype).reshape(node.shape)
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


# ---------------------------------------------------------------------------
# init and optimizer


def init_conv_weight(shape: tuple[int, int, int, int], rng: np.random.Generator) -> Tensor:
    """Uniform in +-sqrt(6 / fan_in), fan_in = (in_ch / groups) * kh * kw."""
    _, cg, kh, kw = shape
    bound = math.sqrt(6.0 / (cg * kh * kw))
    data = rng.uniform(-bound, bound, size=shape)
    return Tensor(data, requires_grad=True)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], state: AdamState) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads):
        raise ValueError(f"adam_step: {len(params)} params but {len(grads)} grads")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            raise ValueError(f"adam_step: parameter {i} has no gradient")
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} != param shape {p.shape} (parameter {i})")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"adam_step: non-finite gradient for parameter {i}")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    elif len(state.m) != len(params):
        raise ValueError("adam_step: optimizer state does not match parameter list")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if state.lr == 0.0:
            continue
        step = (state.lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
        p -= step.astype(p.dtype, copy=False)


class Adam:
    """Adam over a fixed list of leaf tensors, reading their ``.grad``."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = float(value)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state)


# ---------------------------------------------------------------------------
# finite-difference verification


def analytic_gradients(builder: Callable[..., Tensor], tensors: Sequence[Tensor]) -> list[np.ndarray]:
    """Backward-pass gradients of ``builder(*tensors)``; inputs are left untouched."""
    flags = [t.requires_grad for t in tensors]
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    try:
        backward(builder(*tensors))
        return [np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64) for t in tensors]
    finally:
        for t, f in zip(tensors, flags):
            t.requires_grad = f
            t.grad = None


def numeric_gradients(
    builder: Callable[..., Tensor],
    tensors: Sequence[Tensor],
    eps: float = 1e-3,
    max_halvings: int = 12,
    index: Sequence[np.ndarray] | None = None,
) -> list[np.ndarray]:
    """Central differences of ``builder(*tensors)``, computed without autograd.

    If the two probes of an element take different relu/maxpool branches the
    step is halved (up to ``max_halvings`` times), since a difference
    quotient across a kink does not estimate the derivative. ``index`` limits
    the probed flat positions per tensor; unprobed entries are NaN.
    """
    out = []
    with no_grad():
        for j, t in enumerate(tensors):
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size) if index is None else index[j]
            num = np.full(flat.size, np.nan)
            for i in idx:
                num[i] = _central_difference(builder, tensors, flat, int(i), eps, max_halvings)
            out.append(num.reshape(t.shape))
    return out


def max_rel_error(analytic: Sequence[np.ndarray], numeric: Sequence[np.ndarray]) -> float:
    """max |a - n| / max(|a|, |n|, 1e-6) over all probed (non-NaN) entries."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a, n = np.asarray(a, dtype=np.float64).ravel(), np.asarray(n, dtype=np.float64).ravel()
        keep = ~np.isnan(n)
        if keep.any():
            a, n = a[keep], n[keep]
            err = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
            worst = max(worst, float(err.max()))
    return worst


def grad_check(
    builder: Callable[..., Tensor],
    inputs: Tensor | Sequence[Tensor],
    eps: float = 1e-3,
    max_elements: int | None = None,
    rng: np.random.Generator | None = None,
    max_halvings: int = 12,
    oracle_precision: str | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``builder`` maps the input tensor(s) to a scalar loss. ``max_elements``
    caps the probes per tensor (chosen with ``rng``).

    With ``oracle_precision="f64"`` the difference quotients are evaluated on
    float64 copies of the inputs (the builder must create any constants in
    the current default dtype), so float32 analytic gradients are compared
    against an oracle free of float32 rounding noise.
    """
    tensors = [inputs] if isinstance(inputs, Tensor) else list(inputs)
    analytic = analytic_gradients(builder, tensors)
    index = None
    if max_elements is not None:
        r = rng or np.random.default_rng(0)
        index = [r.choice(t.numel(), size=min(max_elements, t.numel()), replace=False) for t in tensors]
    if oracle_precision is None:
        numeric = numeric_gradients(builder, tensors, eps, max_halvings, index)
    else:
        with precision(oracle_precision):
            probe = [Tensor(t.data, dtype=_DTYPES[oracle_precision]) for t in tensors]
            numeric = numeric_gradients(builder, probe, eps, max_halvings, index)
    return max_rel_error(analytic, numeric)


def _central_difference(builder, tensors, flat: np.ndarray, i: int, eps: float, max_halvings: int) -> float:
    orig = flat[i]
    step = eps
    for _ in range(max_halvings + 1):
        flat[i] = orig + step
        hi_x = float(flat[i])
        with record_activation_pattern() as pat_hi:
            lp = builder(*tensors).item()
        flat[i] = orig - step
        lo_x = float(flat[i])
        with record_activation_pattern() as pat_lo:
            lm = builder(*tensors).item()
        flat[i] = orig
        if pat_hi == pat_lo:
            break
        step /= 2
    return (lp - lm) / (hi_x - lo_x)
