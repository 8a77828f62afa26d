import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamxl.attention import (
    ContextWindow,
    MultiHeadParams,
    build_chunk_mask,
    build_mask,
    multi_head,
    scaled_dot_attention,
)
from streamxl.errors import ConfigError, DimensionError, NumericalError
from streamxl.tensor import Tensor

INF = math.inf


def attention_loop(q, k, v, mask=None):
    """Per-query loop: logits, stabilized softmax over visible keys, weighted sum."""
    d = q.shape[1]
    out = np.zeros((q.shape[0], v.shape[1]))
    for i in range(q.shape[0]):
        vis = [j for j in range(k.shape[0]) if mask is None or mask[i, j]]
        logits = [sum(q[i, a] * k[j, a] for a in range(d)) / math.sqrt(d) for j in vis]
        m = max(logits)
        w = [math.exp(x - m) for x in logits]
        s = sum(w)
        for wj, j in zip(w, vis):
            out[i] += (wj / s) * v[j]
    return out


def random_params(rng, d, n):
    m = lambda: Tensor(rng.standard_normal((d, d)) / math.sqrt(d))  # noqa: E731
    b = lambda: Tensor(0.1 * rng.standard_normal(d))  # noqa: E731
    return MultiHeadParams(m(), m(), m(), m(), b(), b(), b(), b(), n_heads=n)


# -- ContextWindow -------------------------------------------------------


@pytest.mark.parametrize("text,left,right", [("-2:1", -2, 1), ("-inf:40", -INF, 40), ("-inf:inf", -INF, INF),
                                             ("[-2, 1]", -2, 1), ("0:0", 0, 0)])
def test_window_parse(text, left, right):
    w = ContextWindow.parse(text)
    assert (w.left, w.right) == (left, right)


@pytest.mark.parametrize("text", ["", "2", "a:b", "-2:-1", "1:3", "-1.5:2"])
def test_window_parse_rejects(text):
    with pytest.raises(ConfigError):
        ContextWindow.parse(text)


def test_window_round_trip_text():
    for w in (ContextWindow(-2, 1), ContextWindow(-INF, 40), ContextWindow()):
        assert ContextWindow.parse(w.spec()) == w
    assert str(ContextWindow(-INF, 40)) == "[-inf, 40]"


# -- scaled dot attention ------------------------------------------------


def test_single_frame_returns_value_row(rng):
    v = rng.standard_normal((1, 4))
    out = scaled_dot_attention(Tensor(rng.standard_normal((1, 4))), Tensor(rng.standard_normal((1, 4))), Tensor(v))
    assert np.allclose(out.data, v, rtol=0, atol=1e-15)


def test_identical_keys_give_mean_of_values(rng):
    k = np.tile(rng.standard_normal((1, 4)), (5, 1))
    v = rng.standard_normal((5, 3))
    out = scaled_dot_attention(Tensor(rng.standard_normal((3, 4))), Tensor(k), Tensor(v)).data
    assert np.allclose(out, np.tile(v.mean(0), (3, 1)), atol=1e-14)


def test_identity_mask_returns_values(rng):
    v = rng.standard_normal((4, 3))
    out = scaled_dot_attention(Tensor(rng.standard_normal((4, 2))), Tensor(rng.standard_normal((4, 2))),
                               Tensor(v), np.eye(4, dtype=bool))
    assert np.array_equal(out.data, v)


def test_attention_matches_loop_oracle(rng):
    q, k, v = (rng.standard_normal((6, 4)) for _ in range(3))
    mask = build_mask(6, ContextWindow(-2, 1))
    for m in (None, mask):
        assert np.abs(scaled_dot_attention(Tensor(q), Tensor(k), Tensor(v), m).data
                      - attention_loop(q, k, v, m)).max() <= 1e-12


def test_attention_shape_errors(rng):
    with pytest.raises(DimensionError):
        scaled_dot_attention(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))), Tensor(np.ones((2, 4))))
    with pytest.raises(DimensionError):
        scaled_dot_attention(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3))))


def test_degenerate_mask_row_is_error(rng):
    m = np.ones((3, 3), dtype=bool)
    m[1] = False
    x = Tensor(rng.standard_normal((3, 2)))
    with pytest.raises(NumericalError):
        scaled_dot_attention(x, x, x, m)


# -- multi-head ----------------------------------------------------------


def test_single_head_identity_reduces_to_attention(rng):
    x = rng.standard_normal((5, 4))
    out = multi_head(Tensor(x), Tensor(x), MultiHeadParams.identity(4, 1))
    assert np.array_equal(out.data, scaled_dot_attention(Tensor(x), Tensor(x), Tensor(x)).data)


@pytest.mark.parametrize("n", [1, 2, 4, 8])
def test_output_shape(n, rng):
    p = random_params(rng, 8, n)
    assert multi_head(Tensor(rng.standard_normal((3, 8))), Tensor(rng.standard_normal((5, 8))), p).shape == (3, 8)


def test_head_count_must_divide_dim(rng):
    with pytest.raises(ConfigError):
        random_params(rng, 6, 4)


def head_slicing_oracle(q_in, kv_in, p: MultiHeadParams, mask=None):
    d = q_in.shape[1]
    dh = d // p.n_heads
    heads = []
    for i in range(p.n_heads):
        cols = slice(i * dh, (i + 1) * dh)
        q = q_in @ p.wq.data[:, cols] + p.bq.data[cols]
        k = kv_in @ p.wk.data[:, cols] + p.bk.data[cols]
        v = kv_in @ p.wv.data[:, cols] + p.bv.data[cols]
        heads.append(attention_loop(q, k, v, mask))  # scales by sqrt(dh)
    return np.concatenate(heads, axis=1) @ p.wo.data + p.bo.data


@pytest.mark.parametrize("n", [2, 4])
def test_multi_head_matches_head_slicing_oracle(n, rng):
    p = random_params(rng, 8, n)
    q, kv = rng.standard_normal((4, 8)), rng.standard_normal((6, 8))
    mask = rng.random((4, 6)) < 0.6
    mask[:, 0] = True
    for m in (None, mask):
        got = multi_head(Tensor(q), Tensor(kv), p, m).data
        assert np.abs(got - head_slicing_oracle(q, kv, p, m)).max() <= 1e-12


def test_per_head_scaling_is_sqrt_head_dim(rng):
    # two heads of width 2 in d=4: logits must be divided by sqrt(2), not sqrt(4)
    p = MultiHeadParams.identity(4, 2)
    x = rng.standard_normal((3, 4)) * 3
    got = multi_head(Tensor(x), Tensor(x), p).data
    want = np.concatenate([attention_loop(x[:, :2], x[:, :2], x[:, :2]),
                           attention_loop(x[:, 2:], x[:, 2:], x[:, 2:])], axis=1)
    assert np.abs(got - want).max() <= 1e-12
    wrong = np.concatenate([attention_loop(x[:, :2] / math.sqrt(2), x[:, :2], x[:, :2]),
                            attention_loop(x[:, 2:] / math.sqrt(2), x[:, 2:], x[:, 2:])], axis=1)
    assert np.abs(got - wrong).max() > 1e-6


# -- masks ---------------------------------------------------------------


def test_full_window_mask_all_true():
    assert build_mask(7, ContextWindow()).all()


def test_mask_left_one():
    m = build_mask(4, ContextWindow(-1, 0))
    assert set(map(tuple, np.argwhere(m))) == {(0, 0), (1, 0), (1, 1), (2, 1), (2, 2), (3, 2), (3, 3)}


def test_mask_fig_window_row():
    m = build_mask(5, ContextWindow(-2, 1))
    assert set(np.flatnonzero(m[2])) == {0, 1, 2, 3}


def test_chunk_mask_single_chunk():
    assert build_chunk_mask(5, 5).all() and build_chunk_mask(5, 9).all()


def test_chunk_mask_examples():
    m = build_chunk_mask(8, 4)
    assert set(np.flatnonzero(m[5])) == set(range(8))
    assert set(np.flatnonzero(m[2])) == set(range(4))


def test_chunk_mask_two_chunks_back_invisible():
    m = build_chunk_mask(12, 4)
    assert not m[8, :4].any() and m[8, 4:].all()


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 20), st.integers(-6, 0), st.integers(0, 6))
def test_mask_definition(length, left, right):
    m = build_mask(length, ContextWindow(left, right))
    for q in range(length):
        assert m[q, q]
        for k in range(length):
            assert m[q, k] == (q + left <= k <= q + right)


# -- invariants ----------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_permutation_covariance(seed):
    r = np.random.default_rng(seed)
    p = random_params(r, 8, 2)
    q, kv = r.standard_normal((5, 8)), r.standard_normal((6, 8))
    mask = r.random((5, 6)) < 0.6
    mask[:, 2] = True
    perm = r.permutation(5)
    a = multi_head(Tensor(q), Tensor(kv), p, mask).data
    b = multi_head(Tensor(q[perm]), Tensor(kv), p, mask[perm]).data
    assert np.allclose(a[perm], b, rtol=0, atol=1e-13)


def test_masked_rows_do_not_matter(rng):
    p = random_params(rng, 8, 2)
    q, kv = rng.standard_normal((4, 8)), rng.standard_normal((6, 8))
    mask = np.ones((4, 6), dtype=bool)
    mask[:, 4:] = False
    kv2 = kv.copy()
    kv2[4:] = rng.standard_normal((2, 8)) * 100
    a = multi_head(Tensor(q), Tensor(kv), p, mask).data
    b = multi_head(Tensor(q), Tensor(kv2), p, mask).data
    assert np.array_equal(a, b)


def test_full_window_mask_equals_unmasked(rng):
    p = random_params(rng, 8, 2)
    x = rng.standard_normal((6, 8))
    a = multi_head(Tensor(x), Tensor(x), p, build_mask(6, ContextWindow())).data
    b = multi_head(Tensor(x), Tensor(x), p, None).data
    assert np.array_equal(a, b)
