import io
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamxl import tensor as T
from streamxl.errors import ConfigError, DimensionError, NumericalError
from streamxl.tensor import Tensor
from streamxl.trainer import (
    AdamState,
    Schedule,
    SyntheticTask,
    adam_step,
    cross_entropy,
    evaluate,
    jsonl_logger,
    make_batches,
    task_for,
    toy_setup,
    train,
    warmup_lr,
)
from streamxl.model import build_model

from conftest import tiny_config, tiny_model


# -- cross-entropy -------------------------------------------------------


def test_ce_uniform_is_log_k():
    k = 7
    logp = Tensor(np.full((4, k), -math.log(k)))
    assert float(cross_entropy(logp, [0, 3, 6, 2]).data) == pytest.approx(math.log(k), rel=1e-15)


def test_ce_one_hot_is_zero():
    logp = np.full((3, 4), -np.inf)
    logp[np.arange(3), [1, 0, 3]] = 0.0
    assert float(cross_entropy(Tensor(logp), [1, 0, 3]).data) == 0.0


def test_ce_loop_oracle(rng):
    z = rng.standard_normal((5, 6))
    logp = T.log_softmax_last(Tensor(z))
    y = rng.integers(0, 6, 5)
    want = 0.0
    for t in range(5):
        want += -(z[t, y[t]] - math.log(sum(math.exp(v) for v in z[t]))) / 5
    assert float(cross_entropy(logp, y).data) == pytest.approx(want, abs=1e-12)


def test_ce_label_errors():
    logp = Tensor(np.zeros((3, 4)))
    with pytest.raises(ConfigError):
        cross_entropy(logp, [0, 4, 1])
    with pytest.raises(ConfigError):
        cross_entropy(logp, [0, -1, 1])
    with pytest.raises(DimensionError):
        cross_entropy(logp, [0, 1])


# -- Adam ----------------------------------------------------------------


def test_adam_zero_gradient_leaves_params():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    adam_step({"p": p}, AdamState(), 0.1)
    assert np.array_equal(p.data, [1.0, -2.0])


def test_adam_first_steps_by_hand():
    p = Tensor(np.array([1.0]), requires_grad=True)
    st_ = AdamState()
    p.grad = np.array([0.5])
    adam_step({"p": p}, st_, 0.1)
    # bias-corrected m = 0.5, v = 0.25 -> step 0.1 * 0.5 / (0.5 + 1e-8)
    assert p.data[0] == pytest.approx(1.0 - 0.1 * 0.5 / (0.5 + 1e-8), abs=1e-15)
    p.grad = np.array([-1.0])
    adam_step({"p": p}, st_, 0.1)
    m = (0.9 * 0.05 + 0.1 * -1.0) / (1 - 0.9**2)
    v = (0.999 * 0.00025 + 0.001 * 1.0) / (1 - 0.999**2)
    assert p.data[0] == pytest.approx(1.0 - 0.1 * 0.5 / (0.5 + 1e-8) - 0.1 * m / (math.sqrt(v) + 1e-8), abs=1e-14)


def test_adam_shape_check():
    p = Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(DimensionError):
        adam_step({"p": p}, AdamState(), 0.1, grads={"p": np.zeros(2)})


# -- schedule ------------------------------------------------------------


def test_warmup_values():
    s = Schedule(base_lr=1e-3, warmup_steps=100)
    assert warmup_lr(0, s) == 0.0
    assert warmup_lr(50, s) == pytest.approx(5e-4)
    assert warmup_lr(100, s) == 1e-3
    assert warmup_lr(10_000, s) == 1e-3


def test_warmup_inverse_sqrt_and_floor():
    s = Schedule(base_lr=1e-3, warmup_steps=100, decay="inverse_sqrt", lr_min=1e-4)
    assert warmup_lr(400, s) == pytest.approx(5e-4)
    assert warmup_lr(10**8, s) == 1e-4


def test_schedule_validation():
    with pytest.raises(ConfigError):
        Schedule(warmup_steps=-1)
    with pytest.raises(ConfigError):
        Schedule(main_batch_frames=0)
    with pytest.raises(ConfigError):
        warmup_lr(-1, Schedule())


def test_batch_budget_switches_after_warmup():
    s = Schedule(warmup_steps=3, warmup_batch_frames=10, main_batch_frames=40)
    assert [s.batch_frames(i) for i in range(5)] == [10, 10, 10, 40, 40]


def test_make_batches_examples():
    assert make_batches([3, 4, 5, 2], 7) == [[0, 1], [2, 3]]
    assert make_batches([10, 1], 5) == [[0], [1]]
    assert make_batches([1, 1, 1], 2, order=[2, 0, 1]) == [[2, 0], [1]]
    with pytest.raises(ConfigError):
        make_batches([1], 0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 50), min_size=1, max_size=40), st.integers(1, 120))
def test_make_batches_partition(lengths, budget):
    batches = make_batches(lengths, budget)
    flat = [i for b in batches for i in b]
    assert flat == list(range(len(lengths)))
    for b in batches:
        assert len(b) == 1 or sum(lengths[i] for i in b) <= budget


# -- synthetic task ------------------------------------------------------


def test_synthetic_task_shapes_and_determinism():
    a = SyntheticTask(n_classes=5, feat_dim=4, n_sequences=6, seed=3)
    b = SyntheticTask(n_classes=5, feat_dim=4, n_sequences=6, seed=3)
    for x, y, x2, y2 in zip(a.features, a.labels, b.features, b.labels):
        assert np.array_equal(x, x2) and np.array_equal(y, y2)
        assert x.shape == (y.size, 4)
        assert y.min() >= 0 and y.max() < 5
    h = a.heldout(3)
    assert len(h.labels) == 3 and np.array_equal(h.means, a.means)


def test_strided_task_repeats_labels():
    t = SyntheticTask(n_sequences=2, stride=2)
    for x, y in zip(t.features, t.labels):
        assert x.shape[0] == 2 * y.size


def test_task_for_matches_vgg_stride():
    cfg = tiny_config(front_end="vgg", feat_dim=8)
    t = task_for(cfg, n_sequences=2)
    assert t.stride == 2 and t.feat_dim == 8 and t.n_classes == cfg.n_classes


# -- training loop -------------------------------------------------------


def test_zero_lr_keeps_loss_constant():
    m = tiny_model(requires_grad=True)
    task = SyntheticTask(n_classes=5, feat_dim=6, n_sequences=1, seed=0)
    res = train(m, task, Schedule(base_lr=0.0, warmup_steps=0), steps=4)
    assert np.all(res.losses == res.losses[0])


def test_nan_loss_aborts():
    m = tiny_model(requires_grad=True)
    task = SyntheticTask(n_classes=5, feat_dim=6, n_sequences=2)
    task.features[0][:] = np.nan
    task.features[1][:] = np.nan
    with pytest.raises(NumericalError, match="non-finite"):
        train(m, task, Schedule(), steps=2)


def test_jsonl_log_records():
    m = tiny_model(requires_grad=True)
    task = SyntheticTask(n_classes=5, feat_dim=6, n_sequences=4)
    buf = io.StringIO()
    train(m, task, Schedule(warmup_steps=2), steps=3, eval_task=task.heldout(2), eval_every=2,
          log=jsonl_logger(buf))
    recs = [json.loads(line) for line in buf.getvalue().splitlines()]
    assert [r["step"] for r in recs] == [0, 1, 2]
    for r in recs:
        assert {"step", "lr", "batch_frames", "loss", "accuracy"} <= set(r)
    assert "eval_accuracy" in recs[1] and "eval_accuracy" in recs[2]


def test_training_reduces_loss():
    cfg, sched = toy_setup()
    m = build_model(cfg)
    task = task_for(cfg, n_sequences=16)
    before = evaluate(m, task)
    res = train(m, task, sched, steps=60)
    assert res.losses[-10:].mean() < res.losses[:10].mean()
    assert evaluate(m, task) > before


def test_xl_training_runs():
    m = tiny_model(requires_grad=True, streaming="xl", chunk=8)
    task = SyntheticTask(n_classes=5, feat_dim=6, n_sequences=4)
    res = train(m, task, Schedule(warmup_steps=1), steps=3)
    assert np.isfinite(res.losses).all()
