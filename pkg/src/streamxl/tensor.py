"""Minimal dense tensor with reverse-mode automatic differentiation.

Each primitive returns a new :class:`Tensor`. When any operand takes part in
gradient computation (and recording is enabled) the result carries a
:class:`Record` naming its operands and a backward rule. ``backward`` sorts
the records reachable from a scalar loss into a :class:`Tape` and replays it
in reverse.

Broadcasting is deliberately narrow: element-wise ops accept identical
shapes or a Python scalar. Row-vector broadcasts (biases, layer-norm gain)
go through the explicit ``add_row`` / ``mul_row`` primitives.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels
from .errors import ConfigError, DimensionError, NumericalError

_RECORDING = contextvars.ContextVar("streamxl_recording", default=True)

# Additive mask sentinel for reduced precision; f64 uses -inf directly.
F32_MASK_FILL = -1e30


@contextlib.contextmanager
def no_grad():
    """Disable recording; results are plain constants."""
    token = _RECORDING.set(False)
    try:
        yield
    finally:
        _RECORDING.reset(token)


def is_recording() -> bool:
    return _RECORDING.get()


@dataclass(eq=False)
class Record:
    op: str
    inputs: tuple
    output: "Tensor"
    backward: Callable[[np.ndarray], tuple]


class Tensor:
    """Dense row-major array with optional gradient participation."""

    __slots__ = ("data", "requires_grad", "grad", "_record", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if arr.dtype.kind in "iub":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._record: Record | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t._record = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._record is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _result(op: str, arr: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    needs = is_recording() and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, requires_grad=needs)
    if needs:
        out._record = Record(op, tuple(inputs), out, backward_fn)
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# element-wise


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        c = float(b)
        return _result("add_scalar", a.data + c, (a,), lambda g: (g,))
    if not isinstance(a, Tensor):
        return add(b, a)
    _same_shape("add", a, b)
    return _result("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    a = as_tensor(a)
    _same_shape("sub", a, b)
    return _result("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a: Tensor) -> Tensor:
    return _result("neg", -a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result("scale", a.data * c, (a,), lambda g: (g * c,))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(as_tensor(a), b)
    if not isinstance(a, Tensor):
        return scale(b, a)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _result("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def mul_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Multiply by a constant array of identical shape (e.g. a dropout mask)."""
    c = np.asarray(c, dtype=a.dtype)
    if c.shape != a.shape:
        raise DimensionError(f"mul_const: shapes {a.shape} and {c.shape} differ")
    return _result("mul_const", a.data * c, (a,), lambda g: (g * c,))


def add_row(x: Tensor, b: Tensor) -> Tensor:
    """x[..., d] + b[d], broadcasting b across leading axes."""
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_row: {x.shape} incompatible with row {b.shape}")
    lead = tuple(range(x.data.ndim - 1))
    return _result("add_row", x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)))


def mul_row(x: Tensor, s: Tensor) -> Tensor:
    """x[..., d] * s[d], broadcasting s across leading axes."""
    if s.data.ndim != 1 or x.shape[-1] != s.shape[0]:
        raise DimensionError(f"mul_row: {x.shape} incompatible with row {s.shape}")
    lead = tuple(range(x.data.ndim - 1))
    xd, sd = x.data, s.data
    return _result("mul_row", xd * sd, (x, s), lambda g: (g * sd, (g * xd).sum(axis=lead)))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _result("relu", np.where(pos, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * pos,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd ** 3)
    th = np.tanh(inner)
    out = 0.5 * xd * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd ** 2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th ** 2) * dinner),)

    return _result("gelu", out, (x,), bw)


ACTIVATIONS = {"relu": relu, "gelu": gelu}


def activation(name: str) -> Callable[[Tensor], Tensor]:
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ConfigError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}") from None


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _result("log", np.log(xd), (x,), lambda g: (g / xd,))


# ---------------------------------------------------------------------------
# reductions


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _result("sum_all", np.array(x.data.sum()), (x,), lambda g: (np.full(shape, g, dtype=x.dtype),))


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    shape = x.shape
    return _result("mean_all", np.array(x.data.mean()), (x,), lambda g: (np.full(shape, g / n, dtype=x.dtype),))


def mean_last(x: Tensor) -> Tensor:
    """Mean over the last axis, keeping it as extent 1."""
    n = x.shape[-1]
    shape = x.shape
    return _result(
        "mean_last", x.data.mean(axis=-1, keepdims=True), (x,),
        lambda g: (np.broadcast_to(g / n, shape).copy(),),
    )


def var_last(x: Tensor) -> Tensor:
    """Population variance over the last axis, keeping it as extent 1."""
    n = x.shape[-1]
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    return _result(
        "var_last", (centered ** 2).mean(axis=-1, keepdims=True), (x,),
        lambda g: (g * 2.0 * centered / n,),
    )


def normalize_last(x: Tensor, eps: float) -> Tensor:
    """(x - mean) / sqrt(var + eps) over the last axis."""
    if eps <= 0:
        raise ConfigError("normalize_last: eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc ** 2).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return _result("normalize_last", y, (x,), bw)


# ---------------------------------------------------------------------------
# shape / linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner extents differ for {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return _result("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"transpose expects 2-D, got {x.shape}")
    return _result("transpose", x.data.T.copy(), (x,), lambda g: (g.T,))


def reshape(x: Tensor, shape: tuple) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {old} as {shape}") from None
    return _result("reshape", out.copy(), (x,), lambda g: (g.reshape(old),))


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[start:stop] = g
        return (full,)

    return _result("slice_rows", x.data[start:stop].copy(), (x,), bw)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[..., start:stop] = g
        return (full,)

    return _result("slice_cols", x.data[..., start:stop].copy(), (x,), bw)


def concat_time(a: Tensor, b: Tensor) -> Tensor:
    """Stack ``a`` above ``b`` along the time (first) axis."""
    if a.shape[1:] != b.shape[1:]:
        raise DimensionError(f"concat_time: feature shapes {a.shape[1:]} and {b.shape[1:]} differ")
    n = a.shape[0]
    return _result(
        "concat_time", np.concatenate([a.data, b.data], axis=0), (a, b),
        lambda g: (g[:n], g[n:]),
    )


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if len(parts) == 1:
        return parts[0]
    feat = parts[0].shape[1:]
    for p in parts:
        if p.shape[1:] != feat:
            raise DimensionError(f"concat_rows: feature shapes {feat} and {p.shape[1:]} differ")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])
    return _result(
        "concat_rows", np.concatenate([p.data for p in parts], axis=0), tuple(parts),
        lambda g: tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts))),
    )


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if len(parts) == 1:
        return parts[0]
    lead = parts[0].shape[:-1]
    for p in parts:
        if p.shape[:-1] != lead:
            raise DimensionError(f"concat_cols: leading shapes {lead} and {p.shape[:-1]} differ")
    bounds = np.cumsum([0] + [p.shape[-1] for p in parts])
    return _result(
        "concat_cols", np.concatenate([p.data for p in parts], axis=-1), tuple(parts),
        lambda g: tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(parts))),
    )


def stop_gradient(x: Tensor) -> Tensor:
    """Forward identity that records no dependence on ``x``."""
    return Tensor._wrap(x.data.copy(), requires_grad=False)


def gather_last(x: Tensor, idx: np.ndarray) -> Tensor:
    """out[t] = x[t, idx[t]] for a 2-D ``x``."""
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(x.shape[0])
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[rows, idx] = g
        return (full,)

    return _result("gather_last", x.data[rows, idx].copy(), (x,), bw)


# ---------------------------------------------------------------------------
# softmax family


def _mask_array(mask, shape) -> np.ndarray | None:
    if mask is None:
        return None
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    m = m.astype(bool)
    if m.shape != shape:
        raise DimensionError(f"mask shape {m.shape} does not match logits {shape}")
    bad = ~m.any(axis=-1)
    if bad.any():
        rows = np.argwhere(bad)[:5].tolist()
        raise NumericalError(f"degenerate attention row: fully masked at {rows}")
    return m


def softmax_last(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis; masked entries receive exactly 0."""
    m = _mask_array(mask, x.shape)
    if x.dtype == np.float64 or m is None:
        y = kernels.masked_softmax(x.data, m)
    else:
        # reduced precision: large finite sentinel instead of -inf
        filled = np.where(m, x.data, np.asarray(F32_MASK_FILL, dtype=x.dtype))
        y = kernels.masked_softmax(filled, None)
        y = np.where(m, y, 0.0).astype(x.dtype)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result("softmax_last", y, (x,), bw)


def log_softmax_last(x: Tensor) -> Tensor:
    xd = x.data
    z = xd - xd.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _result("log_softmax_last", out, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


# ---------------------------------------------------------------------------
# convolution and pooling


def conv1d(x: Tensor, kernel: Tensor) -> Tensor:
    """Same-padded temporal convolution: x [T, d], kernel [k, d, d_out] -> [T, d_out]."""
    k = kernel.shape[0]
    if k % 2 == 0:
        raise ConfigError(f"conv1d: kernel size must be odd, got {k}")
    if x.data.ndim != 2 or kernel.data.ndim != 3 or kernel.shape[1] != x.shape[1]:
        raise DimensionError(f"conv1d: input {x.shape} incompatible with kernel {kernel.shape}")
    pad = (k - 1) // 2
    xd, wd = x.data, kernel.data
    out = kernels.conv1d_forward(xd, wd, pad)

    def bw(g):
        return kernels.conv1d_backward(xd, wd, g, pad)

    return _result("conv1d", out, (x, kernel), bw)


def conv2d(x: Tensor, kernel: Tensor, stride=(1, 1)) -> Tensor:
    """Same-padded 2-D convolution over (time, freq): x [T, F, C], kernel [kt, kf, C, C_out]."""
    if x.data.ndim != 3 or kernel.data.ndim != 4 or kernel.shape[2] != x.shape[2]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    kt, kf = kernel.shape[:2]
    if kt % 2 == 0 or kf % 2 == 0:
        raise ConfigError(f"conv2d: kernel extents must be odd, got {(kt, kf)}")
    pad = ((kt - 1) // 2, (kf - 1) // 2)
    if x.shape[0] + 2 * pad[0] < kt or x.shape[1] + 2 * pad[1] < kf:
        raise DimensionError(f"conv2d: input {x.shape} smaller than kernel {kernel.shape[:2]}")
    stride = (int(stride[0]), int(stride[1]))
    xd, wd = x.data, kernel.data
    out = kernels.conv2d_forward(xd, wd, stride, pad)

    def bw(g):
        return kernels.conv2d_backward(xd, wd, g, stride, pad)

    return _result("conv2d", out, (x, kernel), bw)


def maxpool2d(x: Tensor, factor=(2, 1)) -> Tensor:
    """Non-overlapping max pooling over (time, freq); remainders are dropped."""
    if x.data.ndim != 3:
        raise DimensionError(f"maxpool2d expects [T, F, C], got {x.shape}")
    factor = (int(factor[0]), int(factor[1]))
    if x.shape[0] // factor[0] == 0 or x.shape[1] // factor[1] == 0:
        raise DimensionError(f"maxpool2d: input {x.shape} empties under pooling {factor}")
    out, arg = kernels.maxpool2d_forward(x.data, factor)
    shape = x.shape
    return _result("maxpool2d", out, (x,), lambda g: (kernels.maxpool2d_backward(g, arg, shape, factor),))


def maxpool_time(x: Tensor, factor: int = 2) -> Tensor:
    return maxpool2d(x, (factor, 1))


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or ``p == 0``."""
    if rng is None or p <= 0.0:
        return x
    keep = rng.random(x.shape) >= p
    return mul_const(x, keep / (1.0 - p))


# ---------------------------------------------------------------------------
# tape and backward


class Tape:
    """Records reachable from a loss, in topological (execution) order."""

    def __init__(self, records: list[Record]):
        self.records = records

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        order: list[Record] = []
        seen: set[int] = set()
        if loss._record is None:
            return cls(order)
        stack = [(loss._record, False)]
        while stack:
            rec, expanded = stack.pop()
            if expanded:
                order.append(rec)
                continue
            if id(rec) in seen:
                continue
            seen.add(id(rec))
            stack.append((rec, True))
            for inp in reversed(rec.inputs):
                if inp._record is not None and id(inp._record) not in seen:
                    stack.append((inp._record, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.records)

    def n_elements(self) -> int:
        """Total element count of recorded intermediate results (activation-memory proxy)."""
        return int(sum(r.output.size for r in self.records))


def backward(loss: Tensor) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every grad-enabled leaf."""
    if loss.size != 1:
        raise DimensionError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise NumericalError("backward: loss does not depend on any grad-enabled tensor")
    tape = Tape.from_loss(loss)
    if loss.is_leaf:
        loss.grad = loss.grad + np.ones_like(loss.data)
        return tape
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = pending.pop(id(rec.output), None)
        if g is None:
            continue
        grads = rec.backward(g)
        for inp, gi in zip(rec.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp._record is None:
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
                inp.grad += gi
            else:
                key = id(inp)
                prev = pending.get(key)
                pending[key] = gi.copy() if prev is None else prev + gi
    return tape


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()


def finite_diff_check(f, inputs, eps: float = 1e-5, exclude: Iterable[int] = ()) -> float:
    """Worst relative error between autodiff and central finite differences.

    ``f`` maps the list of ``inputs`` to a scalar tensor. Inputs whose index is
    in ``exclude`` are skipped (use it for operands severed by stop_gradient).
    The relative error denominator is ``max(|analytic|, |numeric|, 1e-8)``.
    """
    if eps <= 0:
        raise ConfigError("finite_diff_check: eps must be positive")
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    exclude = set(exclude)
    for t in inputs:
        t.requires_grad = True
        t.grad = np.zeros_like(t.data)
    out = f(inputs)
    with no_grad():
        again = f(inputs)
    if not np.array_equal(out.data, again.data):
        raise NumericalError("finite_diff_check: f is not deterministic")
    backward(out)

    worst = 0.0
    with no_grad():
        for i, t in enumerate(inputs):
            if i in exclude:
                continue
            flat = t.data.reshape(-1)
            analytic = t.grad.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + eps
                fp = float(f(inputs).data)
                flat[j] = orig - eps
                fm = float(f(inputs).data)
                flat[j] = orig
                num = (fp - fm) / (2 * eps)
                a = float(analytic[j])
                err = abs(a - num) / max(abs(a), abs(num), 1e-8)
                worst = max(worst, err)
    return worst
