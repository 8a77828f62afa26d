import struct

import numpy as np
import pytest

from streamxl import tensor as T
from streamxl.errors import ConfigError, DimensionError, FormatError
from streamxl.model import (
    MAGIC,
    build_model,
    count_params,
    count_params_config,
    load,
    load_into,
    reference_config,
    save,
)

from conftest import tiny_config, tiny_model


def test_smallest_model_builds():
    m = build_model(tiny_config(n_layers=1, n_heads=1, d_model=8, n_classes=4))
    out = m.forward(np.zeros((3, 6)))
    assert out.shape == (3, 4)


@pytest.mark.parametrize("kw", [dict(), dict(norm="post"), dict(front_end="vgg", feat_dim=8),
                                dict(interleaved_conv=True), dict(dtype="float32")])
def test_rows_are_log_distributions(kw, rng):
    m = tiny_model(**kw)
    out = m.forward(rng.standard_normal((10, m.config.feat_dim)))
    assert out.dtype == np.dtype(m.config.dtype)
    assert np.allclose(np.exp(out.data).sum(1), 1, atol=1e-5)


def test_eval_deterministic(rng):
    m = tiny_model(dropout=0.3)
    x = rng.standard_normal((6, 6))
    assert np.array_equal(m.forward(x).data, m.forward(x).data)


def test_train_mode_uses_dropout(rng):
    m = tiny_model(dropout=0.3)
    x = rng.standard_normal((6, 6))
    assert not np.array_equal(m.forward(x, mode="train").data, m.forward(x).data)
    m0 = tiny_model(dropout=0.0)
    assert np.array_equal(m0.forward(x, mode="train").data, m0.forward(x).data)


def test_forward_rejects_bad_mode_and_dim(rng):
    m = tiny_model()
    with pytest.raises(ConfigError):
        m.forward(np.zeros((2, 6)), mode="infer")
    with pytest.raises(DimensionError):
        m.forward(np.zeros((2, 7)))


def test_return_hidden(rng):
    m = tiny_model(n_layers=3)
    out, hidden = m.forward(rng.standard_normal((4, 6)), return_hidden=True)
    assert len(hidden) == 3 and all(h.shape == (4, 8) for h in hidden)


def test_invalid_configs():
    with pytest.raises(ConfigError):
        tiny_config(d_model=10, n_heads=4)
    with pytest.raises(ConfigError):
        tiny_config(conv_kernel=4)
    with pytest.raises(ConfigError):
        tiny_config(streaming="sometimes")


# -- counting ------------------------------------------------------------


@pytest.mark.parametrize("kw", [dict(), dict(front_end="vgg", feat_dim=8), dict(interleaved_conv=True),
                                dict(norm="post")])
def test_breakdown_sums_and_matches_model(kw):
    cfg = tiny_config(**kw)
    total, bd = count_params(build_model(cfg, requires_grad=False))
    assert total == sum(v for k, v in bd.items() if k != "per_block")
    assert (total, bd) == count_params_config(cfg)
    assert total == sum(p.size for p in build_model(cfg, requires_grad=False).parameters().values())


def test_block_hand_count():
    # d=8, d_ff=16: four 8x8 projections with biases, two FFN layers, two layer norms
    _, bd = count_params_config(tiny_config(d_model=8, n_heads=2, d_ff=16))
    assert bd["per_block"] == 4 * (64 + 8) + (8 * 16 + 16 + 16 * 8 + 8) + 2 * 16
    _, bd = count_params_config(tiny_config(d_model=8, n_heads=2, d_ff=16, interleaved_conv=True))
    assert bd["per_block"] == 4 * (64 + 8) + (8 * 16 + 16 + 16 * 8 + 8) + 3 * 16 + 3 * 64 + 8


def test_linear_front_end_count():
    _, bd = count_params_config(tiny_config(feat_dim=6, d_model=8))
    assert bd["front_end"] == 6 * 8 + 8


def test_reference_config_lookup():
    cfg, size = reference_config("vgg-n8-624")
    assert cfg.d_model == 624 and size == 53.5
    with pytest.raises(ConfigError):
        reference_config("nope")


# -- serialization -------------------------------------------------------


@pytest.mark.parametrize("kw", [dict(), dict(front_end="vgg", feat_dim=8, interleaved_conv=True),
                                dict(dtype="float32")])
def test_save_load_bitwise(kw, tmp_path, rng):
    m = tiny_model(**kw)
    path = tmp_path / "m.sxlm"
    save(m, path)
    assert path.read_bytes()[:4] == MAGIC
    m2 = load(path)
    assert m2.config == m.config
    for (n, p), q in zip(m.parameters().items(), m2.parameters().values()):
        assert p.data.dtype == q.data.dtype and np.array_equal(p.data, q.data), n
    x = rng.standard_normal((5, m.config.feat_dim))
    assert np.array_equal(m.forward(x).data, m2.forward(x).data)


def test_bad_magic(tmp_path):
    path = tmp_path / "m.sxlm"
    save(tiny_model(), path)
    buf = bytearray(path.read_bytes())
    buf[0:4] = b"XXXX"
    path.write_bytes(bytes(buf))
    with pytest.raises(FormatError):
        load(path)


def test_truncated(tmp_path):
    path = tmp_path / "m.sxlm"
    save(tiny_model(), path)
    buf = path.read_bytes()
    for cut in (3, 10, len(buf) // 2, len(buf) - 1):
        path.write_bytes(buf[:cut])
        with pytest.raises(FormatError):
            load(path)


def test_version_mismatch(tmp_path):
    path = tmp_path / "m.sxlm"
    save(tiny_model(), path)
    buf = bytearray(path.read_bytes())
    buf[4:8] = struct.pack("<I", 99)
    path.write_bytes(bytes(buf))
    with pytest.raises(FormatError, match="version"):
        load(path)


def test_shape_mismatch(tmp_path):
    path = tmp_path / "m.sxlm"
    save(tiny_model(d_ff=16), path)
    with pytest.raises(FormatError, match="mismatch"):
        load_into(tiny_model(d_ff=32), path)


# -- numerical health ----------------------------------------------------


def test_deep_pre_norm_finite_at_init():
    rng = np.random.default_rng(0)
    for L in (1, 12, 48):
        m = tiny_model(n_layers=L, seed=L)
        with T.no_grad():
            for _ in range(3):
                x = rng.uniform(-5, 5, (8, 6))
                assert np.isfinite(m.forward(x).data).all()


def test_many_seeds_finite_at_init():
    rng = np.random.default_rng(1)
    for seed in range(100):
        m = tiny_model(n_layers=2, seed=seed)
        with T.no_grad():
            assert np.isfinite(m.forward(rng.uniform(-5, 5, (6, 6))).data).all()
