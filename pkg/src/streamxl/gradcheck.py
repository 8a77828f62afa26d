"""Finite-difference checks for every primitive and each composite block.

Each case builds random operands and a scalar loss ``sum(out * R)`` with a
fixed random ``R``; this keeps every gradient coordinate O(1) so relative
errors stay meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .attention import MultiHeadParams, multi_head
from .layers import (
    BlockParams,
    ConvParams,
    FFNParams,
    LayerNormParams,
    VGGEncoder,
    block_forward,
)
from .tensor import Tensor

PRIMITIVE_TOL = 1e-6
BLOCK_TOL = 1e-4
F32_TOL = 5e-2
EPS = 1e-5
F32_EPS = 1e-2


SEVERED = "severed"  # analytic gradient must be bitwise zero
STRUCTURAL = "structural"  # analytic gradient is zero up to rounding
STRUCTURAL_TOL = 1e-10
F32_STRUCTURAL_TOL = 1e-4


@dataclass
class Case:
    name: str
    kind: str  # "primitive" or "block"
    build: Callable


def _weighted(out_fn, shape_rng):
    """Wrap ``out_fn(inputs) -> Tensor`` into a scalar loss with fixed random weights."""
    cache = {}

    def f(inputs):
        out = out_fn(inputs)
        r = cache.get("r")
        if r is None:
            r = cache["r"] = Tensor._wrap(shape_rng.standard_normal(out.shape).astype(out.dtype))
        return T.sum_all(T.mul(out, r))

    return f


def _t(rng, *shape, dtype=np.float64, low=None, high=None):
    if low is not None:
        return Tensor(rng.uniform(low, high, size=shape).astype(dtype))
    return Tensor(rng.standard_normal(shape).astype(dtype))


def _unary(fn, shape=(3, 5), **kw):
    def build(rng, dtype):
        x = _t(rng, *shape, dtype=dtype, **kw)
        return _weighted(lambda ins: fn(ins[0]), rng), [x], {}
    return build


def _binary(fn, sa, sb):
    def build(rng, dtype):
        a, b = _t(rng, *sa, dtype=dtype), _t(rng, *sb, dtype=dtype)
        return _weighted(lambda ins: fn(ins[0], ins[1]), rng), [a, b], {}
    return build


def _softmax_masked(rng, dtype):
    x = _t(rng, 4, 6, dtype=dtype)
    mask = rng.random((4, 6)) < 0.6
    mask[np.arange(4), rng.integers(0, 6, 4)] = True
    return _weighted(lambda ins: T.softmax_last(ins[0], mask), rng), [x], {}


def _gather(rng, dtype):
    x = _t(rng, 5, 4, dtype=dtype)
    idx = rng.integers(0, 4, 5)
    return _weighted(lambda ins: T.gather_last(ins[0], idx), rng), [x], {}


def _mul_const(rng, dtype):
    x = _t(rng, 3, 4, dtype=dtype)
    c = rng.standard_normal((3, 4))
    return _weighted(lambda ins: T.mul_const(ins[0], c), rng), [x], {}


def _conv1d(rng, dtype):
    x, k = _t(rng, 6, 3, dtype=dtype), _t(rng, 3, 3, 2, dtype=dtype)
    return _weighted(lambda ins: T.conv1d(ins[0], ins[1]), rng), [x, k], {}


def _conv2d(rng, dtype):
    x, k = _t(rng, 5, 4, 2, dtype=dtype), _t(rng, 3, 3, 2, 2, dtype=dtype)
    return _weighted(lambda ins: T.conv2d(ins[0], ins[1]), rng), [x, k], {}


def _maxpool(rng, dtype):
    # distinct values at least 0.05 apart so no perturbation crosses a tie
    vals = rng.permutation(np.arange(40) * 0.05 - 1.0) + rng.uniform(0, 0.01, 40)
    x = Tensor(vals.reshape(5, 4, 2).astype(dtype))
    return _weighted(lambda ins: T.maxpool2d(ins[0], (2, 2)), rng), [x], {}


def _stop_gradient(rng, dtype):
    # y reaches the loss only through stop_gradient: excluded from the finite
    # difference comparison, and its analytic gradient must be exactly zero
    x, y = _t(rng, 3, 4, dtype=dtype), _t(rng, 3, 4, dtype=dtype)
    return _weighted(lambda ins: T.mul(T.stop_gradient(ins[1]), ins[0]) + T.stop_gradient(ins[1]), rng), \
        [x, y], {1: SEVERED}


def _concat_rows(rng, dtype):
    a, b, c = _t(rng, 2, 3, dtype=dtype), _t(rng, 1, 3, dtype=dtype), _t(rng, 3, 3, dtype=dtype)
    return _weighted(lambda ins: T.concat_rows(ins), rng), [a, b, c], {}


def _concat_cols(rng, dtype):
    a, b = _t(rng, 3, 2, dtype=dtype), _t(rng, 3, 4, dtype=dtype)
    return _weighted(lambda ins: T.concat_cols(ins), rng), [a, b], {}


PRIMITIVES = [
    Case("matmul", "primitive", _binary(T.matmul, (3, 4), (4, 2))),
    Case("add", "primitive", _binary(T.add, (3, 4), (3, 4))),
    Case("sub", "primitive", _binary(T.sub, (3, 4), (3, 4))),
    Case("mul", "primitive", _binary(T.mul, (3, 4), (3, 4))),
    Case("scale", "primitive", _unary(lambda x: T.scale(x, -1.7))),
    Case("mul_const", "primitive", _mul_const),
    Case("add_row", "primitive", _binary(T.add_row, (3, 4), (4,))),
    Case("mul_row", "primitive", _binary(T.mul_row, (3, 4), (4,))),
    Case("relu", "primitive", _unary(T.relu)),
    Case("gelu", "primitive", _unary(T.gelu)),
    Case("exp", "primitive", _unary(T.exp)),
    Case("log", "primitive", _unary(T.log, low=0.5, high=2.0)),
    Case("sum_all", "primitive", _unary(T.sum_all)),
    Case("mean_all", "primitive", _unary(T.mean_all)),
    Case("mean_last", "primitive", _unary(T.mean_last)),
    Case("var_last", "primitive", _unary(T.var_last)),
    Case("normalize_last", "primitive", _unary(lambda x: T.normalize_last(x, 1e-5))),
    Case("softmax_last", "primitive", _unary(T.softmax_last, shape=(1, 5))),
    Case("softmax_last_masked", "primitive", _softmax_masked),
    Case("log_softmax_last", "primitive", _unary(T.log_softmax_last)),
    Case("transpose", "primitive", _unary(T.transpose)),
    Case("reshape", "primitive", _unary(lambda x: T.reshape(x, (5, 3)))),
    Case("slice_rows", "primitive", _unary(lambda x: T.slice_rows(x, 1, 3))),
    Case("slice_cols", "primitive", _unary(lambda x: T.slice_cols(x, 1, 4))),
    Case("concat_time", "primitive", _binary(T.concat_time, (2, 3), (4, 3))),
    Case("concat_rows", "primitive", _concat_rows),
    Case("concat_cols", "primitive", _concat_cols),
    Case("gather_last", "primitive", _gather),
    Case("conv1d", "primitive", _conv1d),
    Case("conv2d", "primitive", _conv2d),
    Case("maxpool2d", "primitive", _maxpool),
    Case("stop_gradient", "primitive", _stop_gradient),
]


def random_block(rng, d=8, n_heads=2, d_ff=16, norm="pre", conv=False, dtype=np.float64,
                 activation="relu", scale=0.5) -> BlockParams:
    """Block with random weights and non-trivial layer-norm affine parameters."""
    def m(*shape):
        return Tensor(scale * rng.standard_normal(shape).astype(dtype))

    def v(n, base=0.0):
        return Tensor((base + 0.1 * rng.standard_normal(n)).astype(dtype))

    def ln():
        return LayerNormParams(v(d, 1.0), v(d))

    attn = MultiHeadParams(m(d, d), m(d, d), m(d, d), m(d, d), v(d), v(d), v(d), v(d), n_heads=n_heads)
    ffn = FFNParams(m(d, d_ff), v(d_ff), m(d_ff, d), v(d))
    c = ConvParams(m(3, d, d), v(d)) if conv else None
    return BlockParams(attn, ffn, ln(), ln(), norm, c, ln() if conv else None, activation)


def _key_bias_zero(inputs, p: BlockParams) -> dict:
    # softmax is invariant to a per-row constant, and a key bias adds q.b_k to
    # every logit of a row, so its gradient is identically zero
    return {i: STRUCTURAL for i, t in enumerate(inputs) if t is p.attn.bk}


def _block_case(norm, conv):
    def build(rng, dtype):
        p = random_block(rng, norm=norm, conv=conv, dtype=dtype)
        x = _t(rng, 4, 8, dtype=dtype)
        params = list(p.tensors().values())

        def out(ins):
            return block_forward(ins[0], p)

        inputs = [x] + params
        return _weighted(out, rng), inputs, _key_bias_zero(inputs, p)
    return build


def _two_block_case(rng, dtype):
    p1 = random_block(rng, norm="pre", dtype=dtype)
    p2 = random_block(rng, norm="pre", dtype=dtype)
    x = _t(rng, 4, 8, dtype=dtype)
    inputs = [x] + list(p1.tensors().values()) + list(p2.tensors().values())
    exclude = {**_key_bias_zero(inputs, p1), **_key_bias_zero(inputs, p2)}
    return _weighted(lambda ins: block_forward(block_forward(ins[0], p1), p2), rng), inputs, exclude


def _mha_case(rng, dtype):
    p = random_block(rng, dtype=dtype).attn
    q, kv = _t(rng, 3, 8, dtype=dtype), _t(rng, 5, 8, dtype=dtype)
    mask = np.ones((3, 5), dtype=bool)
    mask[0, 3:] = False
    inputs = [q, kv] + list(p.tensors().values())
    return _weighted(lambda ins: multi_head(ins[0], ins[1], p, mask), rng), inputs, \
        {i: STRUCTURAL for i, t in enumerate(inputs) if t is p.bk}


def _xl_case(rng, dtype):
    p = random_block(rng, norm="pre", dtype=dtype)
    x, cache = _t(rng, 4, 8, dtype=dtype), _t(rng, 4, 8, dtype=dtype)

    def out(ins):
        return block_forward(ins[0], p, cache=T.stop_gradient(ins[1]))

    inputs = [x, cache] + list(p.tensors().values())
    return _weighted(out, rng), inputs, {1: SEVERED, **_key_bias_zero(inputs, p)}


def random_vgg(rng, feat_dim=8, channels=(2, 2, 3, 3), d=6, dtype=np.float64) -> VGGEncoder:
    shapes, flat = VGGEncoder.layout(feat_dim, channels)
    ks = [Tensor((0.5 * rng.standard_normal(s)).astype(dtype)) for s in shapes]
    bs = [Tensor((0.1 * rng.standard_normal(s[3])).astype(dtype)) for s in shapes]
    return VGGEncoder(ks, bs, Tensor((0.5 * rng.standard_normal((flat, d))).astype(dtype)),
                      Tensor((0.1 * rng.standard_normal(d)).astype(dtype)))


def _vgg_case(rng, dtype):
    enc = random_vgg(rng, dtype=dtype)
    x = _t(rng, 6, 8, dtype=dtype)
    return _weighted(lambda ins: enc.forward(ins[0]), rng), [x] + list(enc.tensors().values()), {}


BLOCKS = [
    Case("pre_norm_block", "block", _block_case("pre", False)),
    Case("post_norm_block", "block", _block_case("post", False)),
    Case("ic_pre_norm_block", "block", _block_case("pre", True)),
    Case("ic_post_norm_block", "block", _block_case("post", True)),
    Case("two_pre_norm_blocks", "block", _two_block_case),
    Case("multi_head", "block", _mha_case),
    Case("xl_block_with_cache", "block", _xl_case),
    Case("vgg_encoder", "block", _vgg_case),
]

ALL_CASES = PRIMITIVES + BLOCKS


@dataclass
class CheckResult:
    name: str
    kind: str
    seed: int
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.error <= self.tol


def run_case(case: Case, seed: int, dtype=np.float64) -> CheckResult:
    dtype = np.dtype(dtype)
    rng = np.random.default_rng(seed)
    f, inputs, exclude = case.build(rng, dtype)
    exclude = dict(exclude)
    if dtype == np.float64:
        eps, tol = EPS, (PRIMITIVE_TOL if case.kind == "primitive" else BLOCK_TOL)
    else:
        eps, tol = F32_EPS, F32_TOL
    zero_tol = STRUCTURAL_TOL if dtype == np.float64 else F32_STRUCTURAL_TOL
    err = T.finite_diff_check(f, inputs, eps=eps, exclude=exclude)
    for i, why in exclude.items():
        g = inputs[i].grad
        if why == SEVERED and np.any(g != 0):
            err = float("inf")
        elif why == STRUCTURAL and np.abs(g).max() > zero_tol:
            err = float("inf")
    return CheckResult(case.name, case.kind, seed, err, tol)


def run_suite(seeds=range(10), dtype=np.float64, cases=None) -> list[CheckResult]:
    cases = ALL_CASES if cases is None else cases
    return [run_case(c, s, dtype) for c in cases for s in seeds]
