"""Frame-level cross-entropy training with Adam and a two-phase warmup."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, NumericalError
from .model import AcousticModel
from .tensor import Tensor


def cross_entropy(log_posteriors: Tensor, labels) -> Tensor:
    """Mean over frames of -log p(label)."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = log_posteriors.shape
    if labels.shape != (n,):
        raise DimensionError(f"{labels.shape[0] if labels.ndim else 0} labels for {n} frames")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ConfigError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    return T.neg(T.mean_all(T.gather_last(log_posteriors, labels)))


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float,
              grads: dict[str, np.ndarray] | None = None) -> None:
    """In-place bias-corrected Adam update; gradients default to each ``p.grad``."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = p.grad if grads is None else grads[name]
        if g is None:
            continue
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# schedule and batching


@dataclass
class Schedule:
    base_lr: float = 1e-3
    warmup_steps: int = 100
    warmup_batch_frames: int = 200
    main_batch_frames: int = 400
    decay: str = "constant"  # or "inverse_sqrt"
    lr_min: float = 0.0

    def __post_init__(self):
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")
        if self.warmup_batch_frames < 1 or self.main_batch_frames < 1:
            raise ConfigError("batch budgets must be at least one frame")
        if self.decay not in ("constant", "inverse_sqrt"):
            raise ConfigError(f"decay must be 'constant' or 'inverse_sqrt', got {self.decay!r}")

    def batch_frames(self, step: int) -> int:
        return self.warmup_batch_frames if step < self.warmup_steps else self.main_batch_frames


def warmup_lr(step: int, schedule: Schedule) -> float:
    """Linear ramp from 0 to ``base_lr`` over the warmup steps, then constant
    (or inverse-sqrt decay when configured). Never below ``lr_min``."""
    if step < 0:
        raise ConfigError("step must be non-negative")
    w = schedule.warmup_steps
    if w > 0 and step < w:
        lr = schedule.base_lr * step / w
    elif schedule.decay == "inverse_sqrt" and w > 0:
        lr = schedule.base_lr * math.sqrt(w / step)
    else:
        lr = schedule.base_lr
    return max(lr, schedule.lr_min)


def make_batches(lengths, budget_frames: int, order=None) -> list[list[int]]:
    """Greedy packing of sequence indices into batches of at most ``budget_frames``.

    A sequence longer than the budget forms its own batch. ``order`` fixes the
    visiting order (default: as given).
    """
    if budget_frames < 1:
        raise ConfigError("budget_frames must be >= 1")
    lengths = list(lengths)
    order = range(len(lengths)) if order is None else order
    batches, cur, used = [], [], 0
    for i in order:
        n = lengths[i]
        if cur and used + n > budget_frames:
            batches.append(cur)
            cur, used = [], 0
        cur.append(i)
        used += n
    if cur:
        batches.append(cur)
    return batches


# ---------------------------------------------------------------------------
# synthetic task


@dataclass
class SyntheticTask:
    """Class-conditional Gaussian frames with label runs of 5-20 frames.

    Each class has a random mean direction of norm ``separation``; features
    add isotropic noise of std ``noise``. Under a strided front-end labels are
    given per output frame and repeated over the stride.
    """

    n_classes: int = 8
    feat_dim: int = 16
    n_sequences: int = 64
    min_len: int = 24
    max_len: int = 64
    min_run: int = 5
    max_run: int = 20
    separation: float = 3.0
    noise: float = 1.0
    stride: int = 1
    seed: int = 0
    features: list = field(default_factory=list, repr=False)
    labels: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        rng = np.random.default_rng(self.seed)
        means = rng.standard_normal((self.n_classes, self.feat_dim))
        means *= self.separation / np.linalg.norm(means, axis=1, keepdims=True)
        self.means = means
        if not self.features:
            for _ in range(self.n_sequences):
                f, y = self._sequence(rng)
                self.features.append(f)
                self.labels.append(y)

    def _sequence(self, rng):
        n = int(rng.integers(self.min_len, self.max_len + 1))
        y = np.empty(n, dtype=np.int64)
        t = 0
        while t < n:
            run = int(rng.integers(self.min_run, self.max_run + 1))
            y[t:t + run] = rng.integers(self.n_classes)
            t += run
        frames = np.repeat(y, self.stride)
        x = self.means[frames] + self.noise * rng.standard_normal((frames.size, self.feat_dim))
        return x, y

    def heldout(self, n: int, seed: int | None = None) -> "SyntheticTask":
        """Fresh sequences from the same class means."""
        other = SyntheticTask(**{**self._params(), "n_sequences": 0,
                                 "seed": self.seed + 1 if seed is None else seed})
        other.means = self.means
        rng = np.random.default_rng(other.seed + 104729)
        for _ in range(n):
            f, y = other._sequence(rng)
            other.features.append(f)
            other.labels.append(y)
        other.n_sequences = n
        return other

    def _params(self) -> dict:
        d = asdict(self)
        d.pop("features")
        d.pop("labels")
        return d

    @property
    def lengths(self) -> list[int]:
        return [y.size for y in self.labels]


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    eval_history: list = field(default_factory=list)
    reached_step: int | None = None

    @property
    def losses(self) -> np.ndarray:
        return np.array([r["loss"] for r in self.history])


def evaluate(model: AcousticModel, task: SyntheticTask) -> float:
    """Frame accuracy of eval-mode forward passes over ``task``."""
    correct = total = 0
    with T.no_grad():
        for x, y in zip(task.features, task.labels):
            pred = model.forward(x, mode="eval").data.argmax(axis=-1)
            correct += int((pred == y).sum())
            total += y.size
    return correct / max(total, 1)


def _param_report(model: AcousticModel) -> str:
    norms = [(n, float(np.linalg.norm(p.data))) for n, p in model.parameters().items()]
    norms.sort(key=lambda x: -x[1] if math.isfinite(x[1]) else -math.inf)
    return ", ".join(f"{n}={v:.3g}" for n, v in norms[:8])


def train(model: AcousticModel, task: SyntheticTask, schedule: Schedule, steps: int,
          eval_task: SyntheticTask | None = None, eval_every: int = 100, target_accuracy: float | None = None,
          seed: int = 0, log: Callable[[dict], None] | None = None, grad_clip: float | None = None) -> TrainResult:
    """Run warmup then main-phase Adam steps on ``task``.

    Each step consumes one frame-budgeted batch. Epochs are reshuffled under
    ``seed``; the budget switches from the warmup to the main size at
    ``schedule.warmup_steps``. With ``target_accuracy`` set, training stops
    at the first evaluation reaching it.
    """
    from .streaming import xl_train_step

    rng = np.random.default_rng(seed)
    params = model.parameters()
    state = AdamState()
    result = TrainResult()
    xl = model.config.streaming == "xl"
    queue: list[list[int]] = []
    budget = None
    epoch_rest: list[int] = []
    for step in range(steps):
        b = schedule.batch_frames(step)
        if not queue and not epoch_rest:
            epoch_rest = list(rng.permutation(len(task.labels)))
        if b != budget or not queue:
            pending = [i for batch in queue for i in batch] + epoch_rest
            queue = make_batches(task.lengths, b, pending)
            epoch_rest = []
            budget = b
        batch = queue.pop(0)
        lr = warmup_lr(step, schedule)

        model.zero_grad()
        n_frames = sum(task.labels[i].size for i in batch)
        loss_sum, correct = 0.0, 0
        for i in batch:
            x, y = task.features[i], task.labels[i]
            w = y.size / n_frames
            if xl:
                st = xl_train_step(model, x, y, rng=rng, weight=w)
                loss_sum += st.loss
                correct += st.correct
            else:
                logp = model.forward(x, mode="train", rng=rng)
                loss = T.scale(cross_entropy(logp, y), w)
                T.backward(loss)
                loss_sum += float(loss.data)
                correct += int((logp.data.argmax(axis=-1) == y).sum())
        if not math.isfinite(loss_sum):
            raise NumericalError(f"non-finite loss at step {step}; largest parameter norms: {_param_report(model)}")
        if grad_clip is not None:
            gnorm = math.sqrt(sum(float((p.grad ** 2).sum()) for p in params.values()))
            if gnorm > grad_clip:
                for p in params.values():
                    p.grad *= grad_clip / gnorm
        adam_step(params, state, lr)
        rec = {"step": step, "lr": lr, "batch_frames": n_frames, "loss": loss_sum,
               "accuracy": correct / n_frames}
        result.history.append(rec)
        if eval_task is not None and ((step + 1) % eval_every == 0 or step == steps - 1):
            acc = evaluate(model, eval_task)
            result.eval_history.append({"step": step, "accuracy": acc})
            rec["eval_accuracy"] = acc
            if target_accuracy is not None and acc >= target_accuracy and result.reached_step is None:
                result.reached_step = step
                if log:
                    log(rec)
                break
        if log:
            log(rec)
    return result


def toy_setup(n_layers: int = 2, norm: str = "pre", seed: int = 0, **overrides) -> tuple:
    """Model config, schedule and task sized for a CPU-core convergence run."""
    from .config import ModelConfig

    cfg = ModelConfig(n_layers=n_layers, n_heads=2, d_model=32, d_ff=64, front_end="linear", feat_dim=16,
                      n_classes=8, norm=norm, seed=seed, **overrides).validate()
    schedule = Schedule(base_lr=3e-3, warmup_steps=50, warmup_batch_frames=100, main_batch_frames=200)
    return cfg, schedule


def task_for(config, seed: int = 0, n_sequences: int = 64) -> SyntheticTask:
    """Synthetic task matching ``config``'s feature dim, classes and front-end stride."""
    from .layers import plan_geometry

    stride = plan_geometry().stride if config.front_end == "vgg" else 1
    return SyntheticTask(n_classes=config.n_classes, feat_dim=config.feat_dim, n_sequences=n_sequences,
                         stride=stride, seed=seed)


def jsonl_logger(fh) -> Callable[[dict], None]:
    def write(rec: dict) -> None:
        fh.write(json.dumps(rec) + "\n")
        fh.flush()

    return write
