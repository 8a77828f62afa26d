"""Measurements used by the CLI reports, the acceptance suite and the benchmarks."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import ContextWindow
from .config import ModelConfig
from .init import InitSpec, init_bound, ks_critical, ks_uniform, sample_matrix
from .model import AcousticModel, build_model
from .streaming import XLStreamer
from .tensor import Tensor
from .trainer import cross_entropy


def layer_grad_norms(model: AcousticModel, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Frobenius norm of each block's parameter gradient for one eval-mode pass."""
    model.requires_grad_(True)
    loss = cross_entropy(model.forward(features, mode="eval"), labels)
    T.backward(loss)
    norms = []
    for b in model.blocks:
        sq = sum(float((t.grad ** 2).sum()) for t in b.tensors().values())
        norms.append(np.sqrt(sq))
    return np.array(norms)


def grad_norm_profile(norm: str, init: str, seed: int, n_layers: int = 24, d_model: int = 16,
                      n_frames: int = 16, n_classes: int = 8) -> np.ndarray:
    """Per-layer gradient norms of a freshly initialized toy stack on random data."""
    cfg = ModelConfig(n_layers=n_layers, n_heads=2, d_model=d_model, d_ff=2 * d_model, front_end="linear",
                      feat_dim=d_model, n_classes=n_classes, norm=norm, init=init, seed=seed, dropout=0.0)
    model = build_model(cfg)
    rng = np.random.default_rng(10_000 + seed)
    x = rng.standard_normal((n_frames, d_model))
    y = rng.integers(0, n_classes, n_frames)
    return layer_grad_norms(model, x, y)


def spread(norms: np.ndarray) -> float:
    """max/min ratio of a gradient-norm profile."""
    return float(norms.max() / norms.min())


# ---------------------------------------------------------------------------
# streaming cost


def _toy_stream_model(n_layers: int, d_model: int, seed: int, chunk: int) -> AcousticModel:
    cfg = ModelConfig(n_layers=n_layers, n_heads=2, d_model=d_model, d_ff=2 * d_model, front_end="linear",
                      feat_dim=d_model, n_classes=16, streaming="xl", chunk=chunk, seed=seed, dropout=0.0)
    return build_model(cfg, requires_grad=False)


def xl_chunk_times(model: AcousticModel, n_chunks: int, chunk: int | None = None, seed: int = 0) -> np.ndarray:
    """Wall-clock seconds of each XL chunk step over one stream of ``n_chunks`` chunks."""
    c = int(chunk or model.config.chunk)
    rng = np.random.default_rng(seed)
    frames = rng.standard_normal((n_chunks * c, model.config.d_model)).astype(model.dtype)
    streamer = XLStreamer(model, c)
    times = np.empty(n_chunks)
    for i in range(n_chunks):
        block = frames[i * c:(i + 1) * c]
        t0 = time.perf_counter()
        streamer.step(block)
        times[i] = time.perf_counter() - t0
    return times


@dataclass
class CostProfile:
    times: np.ndarray  # per chunk index, median over repeats
    reference: float
    worst_deviation: float

    def within(self, tol: float) -> bool:
        return self.worst_deviation <= tol


def xl_cost_profile(n_chunks: int = 100, chunk: int = 40, n_layers: int = 4, d_model: int = 128,
                    repeats: int = 5, seed: int = 0, first: int = 2) -> CostProfile:
    """Per-chunk XL step time for chunks ``first``..``n_chunks`` (1-based).

    Each chunk index takes the median over ``repeats`` independent streams so
    scheduler noise in one run does not masquerade as a trend. The deviation
    is measured against the median over all retained chunks.
    """
    model = _toy_stream_model(n_layers, d_model, seed, chunk)
    xl_chunk_times(model, 3, chunk, seed)  # warm caches and lazy imports
    runs = np.stack([xl_chunk_times(model, n_chunks, chunk, seed + r) for r in range(repeats)])
    per_chunk = np.median(runs, axis=0)[first - 1:]
    ref = float(np.median(per_chunk))
    return CostProfile(per_chunk, ref, float(np.abs(per_chunk / ref - 1.0).max()))


def masked_emission_times(n_frames: int, hop: int = 16, n_layers: int = 4, d_model: int = 64,
                          window: ContextWindow = ContextWindow(-np.inf, 2), seed: int = 0) -> np.ndarray:
    """Seconds per emission step of the prefix-recomputing masked streamer."""
    from .streaming import model_context

    cfg = ModelConfig(n_layers=n_layers, n_heads=2, d_model=d_model, d_ff=2 * d_model, front_end="linear",
                      feat_dim=d_model, n_classes=16, streaming="masked", window=window, seed=seed, dropout=0.0)
    model = build_model(cfg, requires_grad=False)
    x = np.random.default_rng(seed).standard_normal((n_frames, d_model))
    right = int(model_context(model, window).right)
    times = []
    for stop in range(hop, n_frames + 1, hop):
        need = min(n_frames, stop + right)
        t0 = time.perf_counter()
        with T.no_grad():
            model.forward(x[:need], mode="eval", streaming="masked", window=window)
        times.append(time.perf_counter() - t0)
    return np.array(times)


# ---------------------------------------------------------------------------
# init statistics


@dataclass
class InitStat:
    name: str
    layer: int
    bound: float
    variance: float
    expected_variance: float
    ks: float
    ks_critical: float

    @property
    def ks_ok(self) -> bool:
        return self.ks < self.ks_critical


def init_stats(model: AcousticModel) -> list[InitStat]:
    """Bound, empirical variance and KS statistic for every sampled weight."""
    cfg = model.config
    out = []
    for name, p in model.parameters().items():
        spec = _spec_for(cfg, name, p)
        if spec is None:
            continue
        b = init_bound(spec)
        w = p.data.ravel()
        out.append(InitStat(name, spec.layer_index, b, float(w.var()), b * b / 3.0,
                            ks_uniform(w, b), ks_critical(w.size)))
    return out


def _spec_for(cfg: ModelConfig, name: str, p: Tensor) -> InitSpec | None:
    leaf = name.rsplit(".", 1)[1]
    if p.data.ndim < 2 or leaf in ("gain", "bias", "b") or leaf.startswith("b"):
        return None
    layer = int(name.split(".")[0][5:]) if name.startswith("block") else 1
    shape = p.shape
    if len(shape) == 2:
        d_in, d_out = shape
    elif len(shape) == 3:  # interleaved conv [k, d, d]
        d_in, d_out = shape[0] * shape[1], shape[0] * shape[2]
    else:  # 2-D conv [kt, kf, c_in, c_out]
        d_in, d_out = shape[0] * shape[1] * shape[2], shape[0] * shape[1] * shape[3]
    return InitSpec(cfg.init, layer, d_in, d_out, cfg.seed)


def sample_stats(spec: InitSpec, n: int, name: str = "probe") -> InitStat:
    """Statistics of ``n`` fresh samples drawn under ``spec``."""
    w = sample_matrix(spec, (n,), name=name)
    b = init_bound(spec)
    return InitStat(name, spec.layer_index, b, float(w.var()), b * b / 3.0, ks_uniform(w, b), ks_critical(n))
