import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from streamxl.diagnostics import grad_norm_profile, init_stats, sample_stats, spread
from streamxl.errors import ConfigError
from streamxl.init import InitSpec, init_bound, ks_critical, ks_uniform, rng_for, sample_matrix, xavier_gamma

from conftest import tiny_model


def test_xavier_gamma_value():
    assert abs(xavier_gamma(512, 512) - 0.0765466) < 1e-7


def test_depth_one_equals_xavier():
    assert init_bound(InitSpec("depth_scale", 1, 300, 200)) == init_bound(InitSpec("xavier_uniform", 1, 300, 200))


def test_depth_four_halves_bound():
    b1 = init_bound(InitSpec("depth_scale", 1, 64, 64))
    assert init_bound(InitSpec("depth_scale", 4, 64, 64)) == pytest.approx(b1 / 2, rel=1e-15)


def test_xavier_ignores_depth():
    assert init_bound(InitSpec("xavier_uniform", 9, 64, 32)) == init_bound(InitSpec("xavier_uniform", 1, 64, 32))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 200), st.integers(1, 4096), st.integers(1, 4096))
def test_bound_decreases_with_depth(layer, d_in, d_out):
    a = init_bound(InitSpec("depth_scale", layer, d_in, d_out))
    b = init_bound(InitSpec("depth_scale", layer + 1, d_in, d_out))
    assert b < a
    assert a == pytest.approx(math.sqrt(6 / (d_in + d_out)) / math.sqrt(layer), rel=1e-12)


@pytest.mark.parametrize("kw", [dict(scheme="he"), dict(layer_index=0), dict(d_in=0)])
def test_invalid_spec(kw):
    base = dict(scheme="depth_scale", layer_index=1, d_in=4, d_out=4)
    base.update(kw)
    with pytest.raises(ConfigError):
        InitSpec(**base)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 48))
def test_samples_strictly_inside_bound(seed, layer):
    spec = InitSpec("depth_scale", layer, 16, 24, seed)
    w = sample_matrix(spec, name="w")
    assert w.shape == (16, 24)
    assert np.all(np.abs(w) < init_bound(spec))


def test_variance_within_two_percent():
    spec = InitSpec("depth_scale", 3, 512, 512, seed=7)
    s = sample_stats(spec, 10**6)
    assert abs(s.variance / s.expected_variance - 1) <= 0.02


def test_ks_against_scipy():
    spec = InitSpec("depth_scale", 5, 128, 64, seed=3)
    w = sample_matrix(spec, (10**5,), name="probe")
    b = init_bound(spec)
    ours = ks_uniform(w, b)
    ref = stats.kstest(w, stats.uniform(loc=-b, scale=2 * b).cdf).statistic
    assert abs(ours - ref) < 1e-12
    assert ours < ks_critical(w.size)


def test_ks_detects_wrong_bound():
    spec = InitSpec("xavier_uniform", 1, 64, 64)
    w = sample_matrix(spec, (10**5,))
    assert ks_uniform(w, init_bound(spec) * 1.1) > ks_critical(w.size)


def test_ks_critical_value():
    # asymptotic 1% two-sided value, 1.6276 / sqrt(n)
    assert ks_critical(10**4) == pytest.approx(1.62762 / 100, rel=1e-4)


def test_sampling_deterministic_and_name_keyed():
    spec = InitSpec("depth_scale", 2, 8, 8, seed=11)
    a = sample_matrix(spec, name="block2.attn.wq")
    assert np.array_equal(a, sample_matrix(spec, name="block2.attn.wq"))
    assert not np.array_equal(a, sample_matrix(spec, name="block2.attn.wk"))
    assert not np.array_equal(a, sample_matrix(InitSpec("depth_scale", 2, 8, 8, seed=12), name="block2.attn.wq"))


def test_rng_is_pcg64():
    assert isinstance(rng_for(0, "x").bit_generator, np.random.PCG64)


def test_model_layer_bounds():
    m = tiny_model(n_layers=12, d_model=16, d_ff=32, init="depth_scale", interleaved_conv=True)
    by_name = {s.name: s for s in init_stats(m)}
    b1 = by_name["block1.attn.wq"].bound
    assert by_name["block12.attn.wq"].bound == pytest.approx(b1 / math.sqrt(12), rel=1e-12)
    assert by_name["block1.attn.wq"].bound == pytest.approx(xavier_gamma(16, 16), rel=1e-15)
    for s in by_name.values():
        w = m.parameters()[s.name].data
        assert np.all(np.abs(w) < s.bound)


def test_model_norms_and_biases_start_neutral():
    m = tiny_model(interleaved_conv=True)
    for name, p in m.parameters().items():
        leaf = name.rsplit(".", 1)[1]
        if leaf == "gain":
            assert np.all(p.data == 1.0), name
        elif leaf in ("bias", "b") or leaf.startswith("b"):
            assert np.all(p.data == 0.0), name


def test_model_init_deterministic():
    a, b = tiny_model(seed=5), tiny_model(seed=5)
    for (n, p), q in zip(a.parameters().items(), b.parameters().values()):
        assert np.array_equal(p.data, q.data), n
    c = tiny_model(seed=6)
    assert not np.array_equal(a.parameters()["block1.attn.wq"].data, c.parameters()["block1.attn.wq"].data)


def test_depth_scale_narrows_gradient_spread():
    wins = sum(spread(grad_norm_profile("post", "depth_scale", s, n_layers=12))
               < spread(grad_norm_profile("post", "xavier_uniform", s, n_layers=12)) for s in range(3))
    assert wins >= 2
