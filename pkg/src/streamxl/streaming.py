"""Streaming inference: mask-based lookahead and chunk recurrence with a cache.

Chunk recurrence keeps, per layer, the previous chunk's inputs to that layer
as extra keys and values. Cached tensors are detached copies, so no gradient
ever flows into an earlier chunk.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from . import tensor as T
from .attention import ContextWindow
from .errors import ConfigError, DimensionError
from .layers import BlockParams, block_forward, encode_range
from .model import AcousticModel
from .tensor import Tensor


def accumulate_context(per_layer: ContextWindow, n_layers: int, encoder_lookahead: int = 0,
                       encoder_left: int = 0, conv_reach: int = 0) -> ContextWindow:
    """Total input context seen by the top layer when every layer uses ``per_layer``.

    Footprints add: each layer contributes its window, each interleaved conv
    ``conv_reach`` frames on both sides, and the front-end its own context.
    """
    if n_layers < 1:
        raise ConfigError("accumulate_context: n_layers must be >= 1")
    left = n_layers * per_layer.left - n_layers * conv_reach - encoder_left
    right = n_layers * per_layer.right + n_layers * conv_reach + encoder_lookahead
    return ContextWindow(left, right)


def latency_ms(right_context_frames: float, frame_period_ms: float = 20.0) -> float:
    if right_context_frames < 0:
        raise ConfigError("right context must be non-negative")
    return right_context_frames * frame_period_ms


def model_context(model: AcousticModel, window: ContextWindow | None = None) -> ContextWindow:
    """Accumulated context of ``model`` under a per-layer ``window``, in encoder frames."""
    cfg = model.config
    g = model.frontend.geometry
    reach = (cfg.conv_kernel - 1) // 2 if cfg.interleaved_conv else 0
    w = window if window is not None else cfg.window
    return accumulate_context(w, cfg.n_layers, g.lookahead, g.left_context, reach)


def masked_stream_forward(model: AcousticModel, features, window: ContextWindow) -> Tensor:
    """Offline pass in which every layer only sees ``window`` around each frame."""
    with T.no_grad():
        return model.forward(features, mode="eval", streaming="masked", window=window)


def masked_stream_infer(model: AcousticModel, features: np.ndarray, window: ContextWindow,
                        hop: int = 1) -> Iterator[tuple[int, np.ndarray]]:
    """Incremental emission for the mask-based model.

    Each step waits until the accumulated right context of the next ``hop``
    frames is available, then recomputes the whole prefix. The work per
    emission therefore grows with the stream length.
    """
    ctx = model_context(model, window)
    if math.isinf(ctx.right):
        raise ConfigError("mask-based streaming needs a finite right context")
    s = model.frontend.geometry.stride
    n_out = features.shape[0] // s
    right = int(ctx.right)
    done = 0
    while done < n_out:
        stop = min(done + hop, n_out)
        need = min(n_out, stop + right)
        with T.no_grad():
            out = model.forward(features[: need * s], mode="eval", streaming="masked", window=window)
        for i in range(done, stop):
            yield i, out.data[i]
        done = stop


@dataclass
class ChunkCache:
    """Per-layer inputs of the previous chunk, detached from any tape."""

    layers: list = field(default_factory=list)
    chunk_index: int = 0
    severed: bool = True

    @classmethod
    def empty(cls, n_layers: int) -> "ChunkCache":
        return cls([None] * n_layers, 0)

    def store(self, layer: int, hidden: Tensor) -> None:
        self.layers[layer] = T.stop_gradient(hidden)


def xl_layer_forward(x_c: Tensor, cache_l: Tensor | None, block: BlockParams,
                     dropout_p: float = 0.0, rng=None) -> tuple[Tensor, Tensor]:
    """One block over the current chunk with the previous chunk as extra keys/values.

    Returns the block output and the cache entry for the next chunk (this
    chunk's block input, detached).
    """
    if cache_l is not None and cache_l.shape[0] == 0:
        cache_l = None
    if cache_l is not None and cache_l.shape[1:] != x_c.shape[1:]:
        raise DimensionError(f"cache feature shape {cache_l.shape[1:]} != chunk {x_c.shape[1:]}")
    cached = None if cache_l is None else T.stop_gradient(cache_l)
    out = block_forward(x_c, block, mask=None, cache=cached, dropout_p=dropout_p, rng=rng)
    return out, T.stop_gradient(x_c)


def _chunk_forward(model: AcousticModel, h: Tensor, cache: ChunkCache, dropout_p=0.0, rng=None) -> Tensor:
    for l, block in enumerate(model.blocks):
        h, cache.layers[l] = xl_layer_forward(h, cache.layers[l], block, dropout_p, rng)
    cache.chunk_index += 1
    return model.head(h)


class _FrontEndBuffer:
    """Raw input frames held until the encoder's lookahead is satisfied."""

    def __init__(self, model: AcousticModel):
        self.frontend = model.frontend
        self.geom = model.frontend.geometry
        self.raw = np.zeros((0, model.config.feat_dim), dtype=model.dtype)
        self.offset = 0  # global index of raw[0]
        self.next_out = 0  # next encoder output index to produce
        self.total: int | None = None

    def push(self, frames: np.ndarray) -> None:
        frames = np.asarray(frames, dtype=self.raw.dtype)
        if frames.ndim != 2 or frames.shape[1] != self.raw.shape[1]:
            raise DimensionError(f"expected frames of shape [n, {self.raw.shape[1]}], got {frames.shape}")
        self.raw = np.concatenate([self.raw, frames], axis=0)

    def close(self) -> None:
        self.total = self.offset + self.raw.shape[0]

    def ready(self) -> int:
        """How many encoder outputs past ``next_out`` are computable now."""
        g = self.geom
        avail = self.offset + self.raw.shape[0]
        if self.total is not None:
            return g.n_out(self.total) - self.next_out
        # output j needs raw frames through s*j + hi
        last = (avail - 1 - g.hi) // g.stride
        return max(0, min(last + 1, g.n_out(avail)) - self.next_out)

    def take(self, n: int) -> np.ndarray:
        start, stop = self.next_out, self.next_out + n
        with T.no_grad():
            enc = encode_range(self.frontend, self.raw, self.offset, start, stop, self.total)
        self.next_out = stop
        self._trim()
        return enc.data

    def _trim(self) -> None:
        g = self.geom
        keep_from = max(0, g.stride * self.next_out + g.lo)
        keep_from -= keep_from % g.stride
        drop = keep_from - self.offset
        if drop > 0:
            self.raw = self.raw[drop:]
            self.offset = keep_from


@dataclass
class StreamState:
    cache: ChunkCache
    pending: np.ndarray
    emitted: int = 0


class XLStreamer:
    """Chunk-by-chunk inference: feed raw feature blocks, receive posterior rows.

    Every call to :meth:`push` or :meth:`finish` returns a list of
    ``(frame_index, log_posterior)`` pairs for all chunks that became complete.
    """

    def __init__(self, model: AcousticModel, chunk: int | None = None):
        self.model = model
        self.chunk = int(chunk or model.config.chunk)
        if self.chunk < 1:
            raise ConfigError("chunk must be >= 1")
        self.frontend = _FrontEndBuffer(model)
        self.state = StreamState(ChunkCache.empty(len(model.blocks)),
                                 np.zeros((0, model.config.d_model), dtype=model.dtype))
        self.chunk_sizes: list[int] = []

    def push(self, frames: np.ndarray) -> list[tuple[int, np.ndarray]]:
        self.frontend.push(frames)
        return self._drain(final=False)

    def finish(self) -> list[tuple[int, np.ndarray]]:
        self.frontend.close()
        return self._drain(final=True)

    def _drain(self, final: bool) -> list[tuple[int, np.ndarray]]:
        n = self.frontend.ready()
        if n > 0:
            self.state.pending = np.concatenate([self.state.pending, self.frontend.take(n)], axis=0)
        out = []
        while self.state.pending.shape[0] >= self.chunk or (final and self.state.pending.shape[0] > 0):
            c = min(self.chunk, self.state.pending.shape[0])
            out.extend(self.step(self.state.pending[:c]))
            self.state.pending = self.state.pending[c:]
        return out

    def step(self, encoded: np.ndarray) -> list[tuple[int, np.ndarray]]:
        """Process one chunk of already-encoded frames."""
        with T.no_grad():
            post = _chunk_forward(self.model, Tensor._wrap(np.ascontiguousarray(encoded)), self.state.cache)
        base = self.state.emitted
        self.state.emitted += post.shape[0]
        self.chunk_sizes.append(post.shape[0])
        return [(base + i, post.data[i]) for i in range(post.shape[0])]


def _blocks(source, block: int) -> Iterable[np.ndarray]:
    if isinstance(source, np.ndarray):
        for s in range(0, source.shape[0], block):
            yield source[s:s + block]
    else:
        yield from source


def stream_infer(model: AcousticModel, feature_source, chunk: int | None = None,
                 read_block: int | None = None) -> Iterator[tuple[int, np.ndarray]]:
    """Yield ``(frame_index, log_posterior)`` pairs as chunks complete.

    ``feature_source`` is either a [T, feat_dim] array (read in blocks of
    ``read_block`` raw frames) or an iterable of such blocks.
    """
    streamer = XLStreamer(model, chunk)
    block = read_block or streamer.chunk * model.frontend.geometry.stride
    for frames in _blocks(feature_source, block):
        yield from streamer.push(frames)
    yield from streamer.finish()


def stream_collect(model: AcousticModel, features: np.ndarray, chunk: int | None = None,
                   read_block: int | None = None) -> np.ndarray:
    rows = [p for _, p in stream_infer(model, features, chunk, read_block)]
    if not rows:
        return np.zeros((0, model.config.n_classes), dtype=model.dtype)
    return np.stack(rows)


def xl_offline_oracle(model: AcousticModel, features, chunk: int) -> np.ndarray:
    """Offline forward under the block-chunk mask; equals chunked streaming output."""
    with T.no_grad():
        return model.forward(features, mode="eval", streaming="xl", chunk=chunk).data


@dataclass
class XLTrainStats:
    loss: float
    n_frames: int
    correct: int
    tape_lengths: list
    tape_elements: list


def xl_train_step(model: AcousticModel, features: np.ndarray, labels: np.ndarray, chunk: int | None = None,
                  mode: str = "train", rng=None, weight: float = 1.0) -> XLTrainStats:
    """Chunk-wise forward/backward over one sequence.

    Gradients of ``weight`` times the mean frame cross-entropy over the whole
    sequence accumulate into the parameters' ``.grad``. Each chunk gets its own tape, so the
    activation footprint depends on the chunk size, not the sequence length.
    """
    from .trainer import cross_entropy

    c = int(chunk or model.config.chunk)
    features = np.asarray(features, dtype=model.dtype)
    g = model.frontend.geometry
    n_out = g.n_out(features.shape[0])
    labels = np.asarray(labels)
    if labels.shape[0] != n_out:
        raise DimensionError(f"{labels.shape[0]} labels for {n_out} output frames")
    drop = model.config.dropout if mode == "train" else 0.0
    if drop > 0 and rng is None:
        rng = model._dropout_rng
    raw = Tensor._wrap(features)
    cache = ChunkCache.empty(len(model.blocks))
    total, correct, lengths, elements = 0.0, 0, [], []
    for start in range(0, n_out, c):
        stop = min(start + c, n_out)
        h = encode_range(model.frontend, raw, 0, start, stop, features.shape[0])
        for l, block in enumerate(model.blocks):
            h, cache.layers[l] = xl_layer_forward(h, cache.layers[l], block, drop, rng)
        cache.chunk_index += 1
        logp = model.head(h)
        ce = cross_entropy(logp, labels[start:stop])
        loss = T.scale(ce, weight * (stop - start) / n_out)
        tape = T.backward(loss)
        lengths.append(len(tape))
        elements.append(tape.n_elements())
        total += float(loss.data)
        correct += int((logp.data.argmax(axis=-1) == labels[start:stop]).sum())
    return XLTrainStats(total, n_out, correct, lengths, elements)
