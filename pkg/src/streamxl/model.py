"""Acoustic model assembly, parameter accounting and the binary model file."""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import MultiHeadParams, build_chunk_mask, build_mask
from .config import ModelConfig
from .errors import ConfigError, DimensionError, FormatError
from .init import InitSpec, sample_matrix
from .layers import (
    BlockParams,
    ConvParams,
    FFNParams,
    LayerNormParams,
    LinearEncoder,
    VGGEncoder,
    block_forward,
    layer_norm,
)
from .tensor import Tensor

MAGIC = b"SXLM"
FORMAT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}

# Published sizes (millions of parameters) of reference configurations,
# used for the parameter-count sanity check.
REFERENCE_CONFIGS = {
    "linear-620": (dict(n_heads=4, d_model=620, front_end="linear", interleaved_conv=False), 51.5),
    "linear-ic-512": (dict(n_heads=4, d_model=512, front_end="linear", interleaved_conv=True), 50.0),
    "vgg-ic-512": (dict(n_heads=4, d_model=512, front_end="vgg", interleaved_conv=True), 51.5),
    "vgg-620": (dict(n_heads=4, d_model=620, front_end="vgg", interleaved_conv=False), 52.0),
    "vgg-ic-n16-512": (dict(n_heads=16, d_model=512, front_end="vgg", interleaved_conv=True), 50.5),
    "vgg-n8-624": (dict(n_heads=8, d_model=624, front_end="vgg", interleaved_conv=False), 53.5),
    "vgg-960": (dict(n_heads=8, d_model=960, front_end="vgg", interleaved_conv=False), 97.0),
    "vgg-24l-624": (dict(n_layers=24, n_heads=8, d_model=624, front_end="vgg", interleaved_conv=False), 101.7),
    "vgg-24l-ic-n16-512": (dict(n_layers=24, n_heads=16, d_model=512, front_end="vgg", interleaved_conv=True), 95.5),
    "vgg-48l-ic-n16-512": (dict(n_layers=48, n_heads=16, d_model=512, front_end="vgg", interleaved_conv=True), 185.7),
}


def reference_config(name: str, **overrides) -> tuple[ModelConfig, float]:
    try:
        kw, size = REFERENCE_CONFIGS[name]
    except KeyError:
        raise ConfigError(f"unknown reference config {name!r}; choose from {sorted(REFERENCE_CONFIGS)}") from None
    base = dict(n_layers=12, d_ff=2048, n_classes=9404, feat_dim=80)
    base.update(kw)
    base.update(overrides)
    return ModelConfig(**base).validate(), size


class AcousticModel:
    """Front-end, a stack of transformer blocks, and a log-softmax classifier."""

    def __init__(self, config: ModelConfig, frontend, blocks: list[BlockParams],
                 final_ln: LayerNormParams | None, cls_w: Tensor, cls_b: Tensor):
        self.config = config
        self.frontend = frontend
        self.blocks = blocks
        self.final_ln = final_ln
        self.cls_w = cls_w
        self.cls_b = cls_b
        self._dropout_rng = np.random.default_rng(config.seed + 7919)

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def parameters(self) -> "OrderedDict[str, Tensor]":
        out = OrderedDict()
        for k, v in self.frontend.tensors().items():
            out[f"frontend.{k}"] = v
        for i, b in enumerate(self.blocks):
            for k, v in b.tensors().items():
                out[f"block{i + 1}.{k}"] = v
        if self.final_ln is not None:
            for k, v in self.final_ln.tensors().items():
                out[f"final_ln.{k}"] = v
        out["classifier.w"] = self.cls_w
        out["classifier.b"] = self.cls_b
        return out

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def requires_grad_(self, flag: bool = True) -> "AcousticModel":
        for p in self.parameters().values():
            p.requires_grad = flag
            p.grad = np.zeros_like(p.data) if flag else None
        return self

    # -- forward pieces ---------------------------------------------------

    def encode(self, features: Tensor) -> Tensor:
        if features.shape[-1] != self.config.feat_dim:
            raise DimensionError(f"expected feature dim {self.config.feat_dim}, got {features.shape[-1]}")
        return self.frontend.forward(features)

    def head(self, h: Tensor) -> Tensor:
        if self.final_ln is not None:
            h = layer_norm(h, self.final_ln)
        return T.log_softmax_last(T.add_row(h @ self.cls_w, self.cls_b))

    def layer_mask(self, n: int, streaming: str | None = None, window=None, chunk: int | None = None):
        mode = streaming or self.config.streaming
        if mode == "offline":
            return None, None
        if mode == "masked":
            w = window if window is not None else self.config.window
            return (None if w.is_full else build_mask(n, w)), None
        c = chunk or self.config.chunk
        return build_chunk_mask(n, c), c

    def forward(self, features, mode: str = "eval", rng=None, streaming: str | None = None,
                window=None, chunk: int | None = None, return_hidden: bool = False):
        """Log-posteriors [T', n_classes] for a [T, feat_dim] feature matrix.

        ``streaming`` overrides the configured mode: ``offline`` uses full
        attention, ``masked`` a per-layer context window, ``xl`` the
        offline-equivalent chunk mask (and chunk-local interleaved conv).
        """
        if mode not in ("train", "eval"):
            raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
        features = T.as_tensor(features, dtype=self.dtype)
        if mode == "train" and self.config.dropout > 0:
            drop, rng = self.config.dropout, (rng if rng is not None else self._dropout_rng)
        else:
            drop, rng = 0.0, None
        h = self.encode(features)
        mask, segment = self.layer_mask(h.shape[0], streaming, window, chunk)
        hidden = []
        for b in self.blocks:
            h = block_forward(h, b, mask, conv_segment=segment, dropout_p=drop, rng=rng)
            if return_hidden:
                hidden.append(h)
        out = self.head(h)
        return (out, hidden) if return_hidden else out


# ---------------------------------------------------------------------------
# construction


def _spec(config: ModelConfig, layer: int, d_in: int, d_out: int) -> InitSpec:
    return InitSpec(config.init, layer, d_in, d_out, config.seed)


def _mat(config, name, layer, d_in, d_out, shape=None) -> Tensor:
    w = sample_matrix(_spec(config, layer, d_in, d_out), shape, name=name, dtype=np.dtype(config.dtype))
    return Tensor(w, name=name)


def _zeros(config, n, name) -> Tensor:
    return Tensor(np.zeros(n, dtype=config.dtype), name=name)


def _ln(config, d) -> LayerNormParams:
    return LayerNormParams.unit(d, config.ln_eps, np.dtype(config.dtype))


def init_model(config: ModelConfig) -> AcousticModel:
    """Sample every parameter for ``config``.

    Block l (1-based) weights use that l in the init bound; the front-end and
    classifier use l = 1. Biases start at zero and layer-norm gains at one.
    """
    config.validate()
    d, dff = config.d_model, config.d_ff
    if config.front_end == "linear":
        frontend = LinearEncoder(_mat(config, "frontend.w", 1, config.feat_dim, d),
                                 _zeros(config, d, "frontend.b"))
    else:
        shapes, flat = VGGEncoder.layout(config.feat_dim, config.vgg_channels)
        kernels, biases = [], []
        for i, s in enumerate(shapes):
            fan_in, fan_out = s[0] * s[1] * s[2], s[0] * s[1] * s[3]
            kernels.append(_mat(config, f"frontend.conv{i}.kernel", 1, fan_in, fan_out, s))
            biases.append(_zeros(config, s[3], f"frontend.conv{i}.bias"))
        frontend = VGGEncoder(kernels, biases, _mat(config, "frontend.w", 1, flat, d),
                              _zeros(config, d, "frontend.b"))

    blocks = []
    for i in range(config.n_layers):
        layer = i + 1
        pre = f"block{layer}"
        attn = MultiHeadParams(
            *(_mat(config, f"{pre}.attn.{n}", layer, d, d) for n in ("wq", "wk", "wv", "wo")),
            *(_zeros(config, d, f"{pre}.attn.{n}") for n in ("bq", "bk", "bv", "bo")),
            n_heads=config.n_heads,
        )
        ffn = FFNParams(_mat(config, f"{pre}.ffn.w1", layer, d, dff), _zeros(config, dff, f"{pre}.ffn.b1"),
                        _mat(config, f"{pre}.ffn.w2", layer, dff, d), _zeros(config, d, f"{pre}.ffn.b2"))
        conv = ln_conv = None
        if config.interleaved_conv:
            k = config.conv_kernel
            conv = ConvParams(_mat(config, f"{pre}.conv.kernel", layer, k * d, k * d, (k, d, d)),
                              _zeros(config, d, f"{pre}.conv.bias"))
            ln_conv = _ln(config, d)
        blocks.append(BlockParams(attn, ffn, _ln(config, d), _ln(config, d), config.norm,
                                  conv, ln_conv, config.activation))

    final_ln = _ln(config, d) if (config.norm == "pre" and config.final_norm) else None
    cls_w = _mat(config, "classifier.w", 1, d, config.n_classes)
    cls_b = _zeros(config, config.n_classes, "classifier.b")
    model = AcousticModel(config, frontend, blocks, final_ln, cls_w, cls_b)
    for name, p in model.parameters().items():
        p.name = name
    return model


def build_model(config: ModelConfig, requires_grad: bool = True) -> AcousticModel:
    model = init_model(config)
    if requires_grad:
        model.requires_grad_(True)
    return model


# ---------------------------------------------------------------------------
# accounting


def count_params(model: AcousticModel) -> tuple[int, dict[str, int]]:
    """Exact parameter total and a per-component breakdown that sums to it."""
    breakdown = OrderedDict(front_end=0, attention=0, ffn=0, conv=0, layer_norm=0, classifier=0)
    per_block = []
    for name, p in model.parameters().items():
        n = p.size
        if name.startswith("frontend."):
            breakdown["front_end"] += n
        elif name.startswith("classifier."):
            breakdown["classifier"] += n
        elif name.startswith("final_ln."):
            breakdown["layer_norm"] += n
        else:
            role = name.split(".")[1]
            key = {"attn": "attention", "ffn": "ffn", "conv": "conv"}.get(role, "layer_norm")
            breakdown[key] += n
    for b in model.blocks:
        per_block.append(sum(t.size for t in b.tensors().values()))
    total = sum(breakdown.values())
    breakdown["per_block"] = per_block[0] if per_block else 0
    return total, breakdown


def count_params_config(config: ModelConfig) -> tuple[int, dict[str, int]]:
    """Same as :func:`count_params` but computed from shapes alone (no sampling)."""
    d, dff, L = config.d_model, config.d_ff, config.n_layers
    if config.front_end == "linear":
        fe = config.feat_dim * d + d
    else:
        shapes, flat = VGGEncoder.layout(config.feat_dim, config.vgg_channels)
        fe = sum(int(np.prod(s)) + s[3] for s in shapes) + flat * d + d
    attn = 4 * (d * d + d)
    ffn = d * dff + dff + dff * d + d
    conv = (config.conv_kernel * d * d + d) if config.interleaved_conv else 0
    ln = (2 * 2 * d) + (2 * d if config.interleaved_conv else 0)
    final = 2 * d if (config.norm == "pre" and config.final_norm) else 0
    breakdown = OrderedDict(
        front_end=fe, attention=L * attn, ffn=L * ffn, conv=L * conv,
        layer_norm=L * ln + final, classifier=d * config.n_classes + config.n_classes,
    )
    total = sum(breakdown.values())
    breakdown["per_block"] = attn + ffn + conv + ln
    return total, breakdown


# ---------------------------------------------------------------------------
# serialization
#
# Layout (all integers little-endian):
#   magic "SXLM" | u32 version | u32 config_len | config text (utf-8)
#   u32 n_params | n_params x [u16 name_len | name | u8 dtype | u8 ndim |
#                              ndim x u32 dim | u64 offset | u64 nbytes]
#   u64 blob_len | blob


def save(model: AcousticModel, path) -> None:
    cfg = model.config.to_text().encode("utf-8")
    params = model.parameters()
    manifest, blobs, offset = [], [], 0
    for name, p in params.items():
        arr = np.ascontiguousarray(p.data, dtype=p.data.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        nb = name.encode("utf-8")
        entry = struct.pack("<H", len(nb)) + nb + struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim)
        entry += struct.pack(f"<{arr.ndim}I", *arr.shape) + struct.pack("<QQ", offset, len(raw))
        manifest.append(entry)
        blobs.append(raw)
        offset += len(raw)
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", FORMAT_VERSION, len(cfg)) + cfg)
        fh.write(struct.pack("<I", len(manifest)))
        for e in manifest:
            fh.write(e)
        fh.write(struct.pack("<Q", offset))
        for b in blobs:
            fh.write(b)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"model file truncated at byte {self.pos} (needed {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_file(path) -> tuple[ModelConfig, "OrderedDict[str, np.ndarray]"]:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise FormatError(f"{path}: not a model file (bad magic)")
    version, cfg_len = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported model format version {version} (expected {FORMAT_VERSION})")
    config = ModelConfig.from_text(r.take(cfg_len).decode("utf-8"))
    (n,) = r.unpack("<I")
    entries = []
    for _ in range(n):
        (nl,) = r.unpack("<H")
        name = r.take(nl).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code not in _CODE_DTYPES:
            raise FormatError(f"{path}: unknown dtype code {code} for {name}")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        off, nbytes = r.unpack("<QQ")
        entries.append((name, _CODE_DTYPES[code], tuple(shape), off, nbytes))
    (blob_len,) = r.unpack("<Q")
    blob = r.take(blob_len)
    arrays = OrderedDict()
    for name, dt, shape, off, nbytes in entries:
        if off + nbytes > len(blob) or nbytes != int(np.prod(shape, dtype=np.int64)) * dt.itemsize:
            raise FormatError(f"{path}: parameter {name} exceeds blob or has inconsistent size")
        arrays[name] = np.frombuffer(blob, dtype=dt, count=int(np.prod(shape, dtype=np.int64)),
                                     offset=off).reshape(shape).astype(dt.newbyteorder("="))
    return config, arrays


def load_into(model: AcousticModel, path) -> AcousticModel:
    """Copy parameters from ``path`` into an existing model, rejecting shape mismatches."""
    _, arrays = _read_file(path)
    params = model.parameters()
    diffs = []
    if set(arrays) != set(params):
        missing = sorted(set(params) - set(arrays))
        extra = sorted(set(arrays) - set(params))
        diffs.append(f"missing {missing[:5]} extra {extra[:5]}")
    for name, p in params.items():
        a = arrays.get(name)
        if a is not None and a.shape != p.shape:
            diffs.append(f"{name}: file {a.shape} vs model {p.shape}")
    if diffs:
        raise FormatError("parameter shape mismatch: " + "; ".join(diffs[:10]))
    for name, p in params.items():
        p.data = arrays[name].astype(p.data.dtype, copy=True)
        if p.requires_grad:
            p.grad = np.zeros_like(p.data)
    return model


def load(path, requires_grad: bool = False) -> AcousticModel:
    config, _ = _read_file(path)
    model = build_model(config, requires_grad=requires_grad)
    return load_into(model, path)
