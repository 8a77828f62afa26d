"""Layer norm, residual blocks, interleaved convolution and the two front-ends."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import MultiHeadParams, multi_head
from .errors import ConfigError, DimensionError
from .tensor import Tensor

LN_EPS = 1e-5


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor
    eps: float = LN_EPS

    def __post_init__(self):
        if self.eps <= 0:
            raise ConfigError("layer norm epsilon must be positive")
        if self.gain.shape != self.bias.shape or self.gain.data.ndim != 1:
            raise DimensionError(f"layer norm gain {self.gain.shape} / bias {self.bias.shape} mismatch")

    @classmethod
    def unit(cls, d: int, eps: float = LN_EPS, dtype=np.float64) -> "LayerNormParams":
        return cls(Tensor(np.ones(d, dtype=dtype)), Tensor(np.zeros(d, dtype=dtype)), eps)

    def tensors(self) -> dict[str, Tensor]:
        return {"gain": self.gain, "bias": self.bias}


def layer_norm(x: Tensor, p: LayerNormParams) -> Tensor:
    if x.shape[-1] != p.gain.shape[0]:
        raise DimensionError(f"layer_norm: feature dim {x.shape[-1]} != {p.gain.shape[0]}")
    return T.add_row(T.mul_row(T.normalize_last(x, p.eps), p.gain), p.bias)


@dataclass
class FFNParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def tensors(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


def feed_forward(x: Tensor, p: FFNParams, act: str = "relu", dropout_p: float = 0.0, rng=None) -> Tensor:
    """Position-wise W2 act(W1 x + b1) + b2."""
    h = T.activation(act)(T.add_row(x @ p.w1, p.b1))
    h = T.dropout(h, dropout_p, rng)
    return T.add_row(h @ p.w2, p.b2)


@dataclass
class ConvParams:
    """Interleaved 1-D convolution: kernel [k, d, d] plus bias."""

    kernel: Tensor
    bias: Tensor

    def __post_init__(self):
        if self.kernel.shape[0] % 2 == 0:
            raise ConfigError(f"interleaved conv kernel must be odd, got {self.kernel.shape[0]}")

    @property
    def lookahead(self) -> int:
        return (self.kernel.shape[0] - 1) // 2

    def tensors(self) -> dict[str, Tensor]:
        return {"kernel": self.kernel, "bias": self.bias}


def interleaved_conv(x: Tensor, p: ConvParams, segment: int | None = None) -> Tensor:
    """Same-padded temporal conv; with ``segment`` each run of that many rows is convolved alone."""
    if segment is None or segment >= x.shape[0]:
        return T.add_row(T.conv1d(x, p.kernel), p.bias)
    parts = [
        T.conv1d(T.slice_rows(x, s, min(s + segment, x.shape[0])), p.kernel)
        for s in range(0, x.shape[0], segment)
    ]
    return T.add_row(T.concat_rows(parts), p.bias)


@dataclass
class BlockParams:
    attn: MultiHeadParams
    ffn: FFNParams
    ln1: LayerNormParams
    ln2: LayerNormParams
    norm: str = "pre"
    conv: ConvParams | None = None
    ln_conv: LayerNormParams | None = None
    activation: str = "relu"

    def __post_init__(self):
        if self.norm not in ("pre", "post"):
            raise ConfigError(f"norm scheme must be 'pre' or 'post', got {self.norm!r}")
        if (self.conv is None) != (self.ln_conv is None):
            raise ConfigError("interleaved conv and its layer norm must be given together")

    def tensors(self) -> dict[str, Tensor]:
        out = {}
        for prefix, group in (("attn", self.attn), ("ffn", self.ffn), ("ln1", self.ln1), ("ln2", self.ln2),
                              ("conv", self.conv), ("ln_conv", self.ln_conv)):
            if group is None:
                continue
            for k, v in group.tensors().items():
                out[f"{prefix}.{k}"] = v
        return out


def block_forward(x: Tensor, p: BlockParams, mask=None, cache: Tensor | None = None,
                  conv_segment: int | None = None, dropout_p: float = 0.0, rng=None) -> Tensor:
    """One transformer block: attention, feed-forward, optional interleaved conv.

    ``cache`` holds the previous chunk's inputs to this block; they join the
    keys and values but never the queries. ``mask`` then has shape
    [T, n_cache + T].
    """
    n_cache = 0 if cache is None else cache.shape[0]
    if p.norm == "pre":
        kv = x if cache is None else T.concat_time(cache, x)
        kv_ln = layer_norm(kv, p.ln1)
        q_ln = kv_ln if n_cache == 0 else T.slice_rows(kv_ln, n_cache, kv.shape[0])
        x = x + multi_head(q_ln, kv_ln, p.attn, mask, dropout_p, rng)
        x = x + feed_forward(layer_norm(x, p.ln2), p.ffn, p.activation, dropout_p, rng)
        if p.conv is not None:
            x = x + interleaved_conv(layer_norm(x, p.ln_conv), p.conv, conv_segment)
    else:
        kv = x if cache is None else T.concat_time(cache, x)
        x = layer_norm(x + multi_head(x, kv, p.attn, mask, dropout_p, rng), p.ln1)
        x = layer_norm(x + feed_forward(x, p.ffn, p.activation, dropout_p, rng), p.ln2)
        if p.conv is not None:
            x = layer_norm(x + interleaved_conv(x, p.conv, conv_segment), p.ln_conv)
    return x


def pre_norm_block(x: Tensor, p: BlockParams, mask=None, **kw) -> Tensor:
    """x + Attn(LN(x)), then x + FFN(LN(x))."""
    if p.norm != "pre":
        raise ConfigError("pre_norm_block called with post-norm parameters")
    return block_forward(x, p, mask, **kw)


def post_norm_block(x: Tensor, p: BlockParams, mask=None, **kw) -> Tensor:
    """LN(x + Attn(x)), then LN(x + FFN(x))."""
    if p.norm != "post":
        raise ConfigError("post_norm_block called with pre-norm parameters")
    return block_forward(x, p, mask, **kw)


# ---------------------------------------------------------------------------
# front-ends


@dataclass(frozen=True)
class Geometry:
    """Time footprint of a front-end.

    Output frame j reads input frames ``stride*j + lo`` through ``stride*j + hi``.
    """

    stride: int
    lo: int
    hi: int

    @property
    def lookahead(self) -> int:
        """Future context in output frames beyond the frame's own input span."""
        return max(0, math.ceil((self.hi - (self.stride - 1)) / self.stride))

    @property
    def left_context(self) -> int:
        return max(0, math.ceil(-self.lo / self.stride))

    def n_out(self, n_in: int) -> int:
        return n_in // self.stride


class LinearEncoder:
    """Single affine projection per frame."""

    kind = "linear"

    def __init__(self, w: Tensor, b: Tensor):
        self.w, self.b = w, b

    @property
    def geometry(self) -> Geometry:
        return Geometry(1, 0, 0)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.w.shape[0]:
            raise DimensionError(f"linear encoder expects feature dim {self.w.shape[0]}, got {x.shape[-1]}")
        return T.add_row(x @ self.w, self.b)

    def tensors(self) -> dict[str, Tensor]:
        return {"w": self.w, "b": self.b}


def linear_encoder(features: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return LinearEncoder(w, b).forward(features)


# Default VGG plan: time/freq pool first so every conv runs at the output
# frame rate; four 3x3 convs then contribute exactly one lookahead frame each.
VGG_CHANNELS = (32, 32, 64, 64)
VGG_PLAN = ("pool:2:2", "conv", "conv", "pool:1:2", "conv", "conv")


def plan_geometry(plan=VGG_PLAN, kernel_sizes=None) -> Geometry:
    """Time footprint of a conv/pool plan; convs default to 3 frames wide."""
    n_conv = sum(step == "conv" for step in plan)
    sizes = list(kernel_sizes) if kernel_sizes is not None else [3] * n_conv
    lo = hi = 0
    stride = 1
    ki = n_conv - 1
    for step in reversed(plan):
        if step == "conv":
            pad = (sizes[ki] - 1) // 2
            lo, hi = lo - pad, hi + pad
            ki -= 1
        else:
            pt = int(step.split(":")[1])
            lo, hi = pt * lo, pt * hi + pt - 1
            stride *= pt
    return Geometry(stride, lo, hi)


@dataclass
class VGGEncoder:
    """Stack of 3x3 convs with ReLU and max-pooling, followed by a linear map to d_model."""

    kernels: list
    biases: list
    w: Tensor
    b: Tensor
    plan: tuple = VGG_PLAN
    kind: str = field(default="vgg", init=False)

    @staticmethod
    def layout(feat_dim: int, channels=VGG_CHANNELS, plan=VGG_PLAN):
        """Conv kernel shapes and flattened output width for a plan."""
        shapes = []
        c_in, f = 1, feat_dim
        ci = 0
        for step in plan:
            if step == "conv":
                shapes.append((3, 3, c_in, channels[ci]))
                c_in = channels[ci]
                ci += 1
            else:
                _, _, pf = step.split(":")
                f //= int(pf)
        if ci != len(channels):
            raise ConfigError(f"VGG plan has {ci} convs but {len(channels)} channel widths")
        if f < 1:
            raise ConfigError(f"frequency axis of {feat_dim} collapses under the VGG pooling plan")
        return shapes, f * c_in

    @property
    def geometry(self) -> Geometry:
        return plan_geometry(self.plan, [k.shape[0] for k in self.kernels])

    def forward(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2:
            raise DimensionError(f"VGG encoder expects [T, F] features, got {x.shape}")
        stride = self.geometry.stride
        if x.shape[0] < stride:
            raise DimensionError(f"VGG encoder needs at least {stride} frames, got {x.shape[0]}")
        h = T.reshape(x, (x.shape[0], x.shape[1], 1))
        ki = 0
        for step in self.plan:
            if step == "conv":
                h = T.relu(T.add_row(T.conv2d(h, self.kernels[ki]), self.biases[ki]))
                ki += 1
            else:
                _, pt, pf = step.split(":")
                h = T.maxpool2d(h, (int(pt), int(pf)))
        h = T.reshape(h, (h.shape[0], h.shape[1] * h.shape[2]))
        if h.shape[1] != self.w.shape[0]:
            raise DimensionError(f"VGG flattened width {h.shape[1]} != projection input {self.w.shape[0]}")
        return T.add_row(h @ self.w, self.b)

    def tensors(self) -> dict[str, Tensor]:
        out = {}
        for i, (k, b) in enumerate(zip(self.kernels, self.biases)):
            out[f"conv{i}.kernel"] = k
            out[f"conv{i}.bias"] = b
        out["w"] = self.w
        out["b"] = self.b
        return out


def vgg_encoder(features: Tensor, params: VGGEncoder) -> Tensor:
    return params.forward(features)


def encode_range(frontend, raw: np.ndarray | Tensor, raw_offset: int, start: int, stop: int,
                 n_raw_total: int | None) -> Tensor:
    """Encoder outputs ``[start, stop)`` computed from a buffered slice of raw frames.

    ``raw`` holds input frames beginning at global index ``raw_offset`` (a
    multiple of the stride). ``n_raw_total`` is the full stream length once it
    is known, else None. The result equals the same rows of an encoder pass
    over the whole stream.
    """
    g = frontend.geometry
    s = g.stride
    if raw_offset % s:
        raise ConfigError("raw buffer offset must be aligned to the encoder stride")
    lo_in = max(0, s * start + g.lo)
    lo_in -= lo_in % s
    lo_in = max(lo_in, raw_offset)
    hi_in = s * (stop - 1) + g.hi + 1
    hi_in += (-hi_in) % s
    avail = raw_offset + raw.shape[0]
    if n_raw_total is not None:
        hi_in = min(hi_in, n_raw_total)
    elif hi_in > avail:
        raise DimensionError(f"encoder outputs up to {stop} need raw frames up to {hi_in}, have {avail}")
    hi_in = min(hi_in, avail)
    if s * start + g.lo < raw_offset and s * start + g.lo >= 0:
        raise DimensionError("raw buffer was trimmed past the encoder's left context")
    window = raw if isinstance(raw, Tensor) else Tensor(raw)
    window = T.slice_rows(window, lo_in - raw_offset, hi_in - raw_offset)
    enc = frontend.forward(window)
    first = lo_in // s
    return T.slice_rows(enc, start - first, stop - first)
