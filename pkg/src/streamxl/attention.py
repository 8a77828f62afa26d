"""Scaled dot-product attention, multi-head attention and context masks."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor

INF = math.inf


@dataclass(frozen=True)
class ContextWindow:
    """Visible range around a frame, as signed offsets ``[left, right]``.

    ``left`` is the (non-positive) offset of the earliest visible frame and
    ``right`` the (non-negative) offset of the latest, so ``[-2, 1]`` sees two
    past frames and one future frame. Either end may be infinite.
    """

    left: float = -INF
    right: float = INF

    def __post_init__(self):
        for v in (self.left, self.right):
            if not (math.isinf(v) or float(v).is_integer()):
                raise ConfigError(f"context bounds must be integers or infinite, got {v!r}")
        if self.left > 0 or self.right < 0:
            raise ConfigError(f"context window [{_fmt(self.left)}, {_fmt(self.right)}] must contain offset 0")

    @classmethod
    def parse(cls, text: str) -> "ContextWindow":
        """Parse ``L:R`` where each side is an integer, ``-inf`` or ``inf``."""
        m = re.fullmatch(r"\s*\[?\s*([+-]?(?:inf|\d+))\s*[:,]\s*([+-]?(?:inf|\d+))\s*\]?\s*", text)
        if not m:
            raise ConfigError(f"malformed context window {text!r}; expected L:R such as -inf:3")
        return cls(_bound(m.group(1)), _bound(m.group(2)))

    @property
    def is_full(self) -> bool:
        return math.isinf(self.left) and math.isinf(self.right)

    def __str__(self) -> str:
        return f"[{_fmt(self.left)}, {_fmt(self.right)}]"

    def spec(self) -> str:
        return f"{_fmt(self.left)}:{_fmt(self.right)}"


def _bound(s: str) -> float:
    s = s.lower()
    if s.endswith("inf"):
        return -INF if s.startswith("-") else INF
    return float(int(s))


def _fmt(v: float) -> str:
    if math.isinf(v):
        return "-inf" if v < 0 else "inf"
    return str(int(v))


def build_mask(length: int, window: ContextWindow) -> np.ndarray:
    """Boolean [T, T] mask; (q, k) is visible iff q + left <= k <= q + right."""
    if length < 1:
        raise ConfigError("build_mask: length must be >= 1")
    q = np.arange(length)[:, None]
    k = np.arange(length)[None, :]
    off = k - q
    return (off >= window.left) & (off <= window.right)


def build_chunk_mask(length: int, chunk: int) -> np.ndarray:
    """Offline equivalent of chunk recurrence: a query sees its own and the previous chunk."""
    if chunk < 1:
        raise ConfigError("build_chunk_mask: chunk must be >= 1")
    idx = np.arange(length) // chunk
    diff = idx[:, None] - idx[None, :]
    return (diff == 0) | (diff == 1)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask=None) -> Tensor:
    """Softmax(q k^T / sqrt(d)) v with masked logits excluded."""
    if q.shape[1] != k.shape[1]:
        raise DimensionError(f"attention: query dim {q.shape[1]} != key dim {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise DimensionError(f"attention: {k.shape[0]} keys but {v.shape[0]} values")
    logits = T.scale(q @ T.transpose(k), 1.0 / math.sqrt(q.shape[1]))
    return T.softmax_last(logits, mask) @ v


@dataclass
class MultiHeadParams:
    """Projections stored head-concatenated: head i owns columns [i*dh, (i+1)*dh)."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bq: Tensor
    bk: Tensor
    bv: Tensor
    bo: Tensor
    n_heads: int

    def __post_init__(self):
        d = self.wq.shape[0]
        if d % self.n_heads:
            raise ConfigError(f"model dim {d} not divisible by {self.n_heads} heads")

    @property
    def d_model(self) -> int:
        return self.wq.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {n: getattr(self, n) for n in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}

    @classmethod
    def identity(cls, d: int, n_heads: int = 1, dtype=np.float64) -> "MultiHeadParams":
        eye = np.eye(d, dtype=dtype)
        z = np.zeros(d, dtype=dtype)
        return cls(*(Tensor(eye) for _ in range(4)), *(Tensor(z) for _ in range(4)), n_heads=n_heads)


def multi_head(q_in: Tensor, kv_in: Tensor, p: MultiHeadParams, mask=None,
               dropout_p: float = 0.0, rng=None) -> Tensor:
    """Multi-head attention of queries ``q_in`` over keys/values ``kv_in``.

    Each head attends at dimension d/N with scaling sqrt(d/N); head outputs are
    concatenated and projected by ``wo``.
    """
    d = p.d_model
    for name, x in (("query", q_in), ("key/value", kv_in)):
        if x.shape[-1] != d:
            raise DimensionError(f"multi_head: {name} dim {x.shape[-1]} != model dim {d}")
    q = T.add_row(q_in @ p.wq, p.bq)
    k = T.add_row(kv_in @ p.wk, p.bk)
    v = T.add_row(kv_in @ p.wv, p.bv)
    dh = d // p.n_heads
    if p.n_heads == 1:
        heads = scaled_dot_attention(q, k, v, mask)
    else:
        heads = T.concat_cols([
            scaled_dot_attention(
                T.slice_cols(q, i * dh, (i + 1) * dh),
                T.slice_cols(k, i * dh, (i + 1) * dh),
                T.slice_cols(v, i * dh, (i + 1) * dh),
                mask,
            )
            for i in range(p.n_heads)
        ])
    out = T.add_row(heads @ p.wo, p.bo)
    return T.dropout(out, dropout_p, rng)
