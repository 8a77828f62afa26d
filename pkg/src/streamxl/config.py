"""Model configuration and its ``key=value`` text form."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .attention import ContextWindow
from .errors import ConfigError
from .init import SCHEMES
from .tensor import ACTIVATIONS

STREAMING_MODES = ("offline", "masked", "xl")
FRONT_ENDS = ("linear", "vgg")


@dataclass
class ModelConfig:
    n_layers: int = 12
    n_heads: int = 8
    d_model: int = 624
    d_ff: int = 2048
    dropout: float = 0.1
    front_end: str = "vgg"
    interleaved_conv: bool = False
    conv_kernel: int = 3
    norm: str = "pre"
    final_norm: bool = True
    streaming: str = "offline"
    window: ContextWindow = field(default_factory=ContextWindow)
    chunk: int = 40
    n_classes: int = 9404
    feat_dim: int = 80
    vgg_channels: tuple = (32, 32, 64, 64)
    activation: str = "relu"
    init: str = "depth_scale"
    ln_eps: float = 1e-5
    frame_ms: float = 20.0
    dtype: str = "float64"
    seed: int = 0

    def violations(self) -> list[str]:
        v = []
        if self.n_layers < 1:
            v.append(f"n_layers must be >= 1 (got {self.n_layers})")
        if self.n_heads < 1:
            v.append(f"n_heads must be >= 1 (got {self.n_heads})")
        elif self.d_model % self.n_heads:
            v.append(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.d_model < 1 or self.d_ff < 1:
            v.append("d_model and d_ff must be positive")
        if not 0.0 <= self.dropout < 1.0:
            v.append(f"dropout must lie in [0, 1) (got {self.dropout})")
        if self.front_end not in FRONT_ENDS:
            v.append(f"front_end must be one of {FRONT_ENDS} (got {self.front_end!r})")
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            v.append(f"conv_kernel must be odd and positive (got {self.conv_kernel})")
        if self.norm not in ("pre", "post"):
            v.append(f"norm must be 'pre' or 'post' (got {self.norm!r})")
        if self.streaming not in STREAMING_MODES:
            v.append(f"streaming must be one of {STREAMING_MODES} (got {self.streaming!r})")
        if self.chunk < 1:
            v.append(f"chunk must be >= 1 (got {self.chunk})")
        if self.n_classes < 2:
            v.append(f"n_classes must be >= 2 (got {self.n_classes})")
        if self.feat_dim < 1:
            v.append(f"feat_dim must be >= 1 (got {self.feat_dim})")
        if self.activation not in ACTIVATIONS:
            v.append(f"activation must be one of {sorted(ACTIVATIONS)} (got {self.activation!r})")
        if self.init not in SCHEMES:
            v.append(f"init must be one of {SCHEMES} (got {self.init!r})")
        if self.ln_eps <= 0:
            v.append("ln_eps must be positive")
        if self.dtype not in ("float32", "float64"):
            v.append(f"dtype must be float32 or float64 (got {self.dtype!r})")
        if len(self.vgg_channels) != 4:
            v.append("vgg_channels must list four widths")
        return v

    def validate(self) -> "ModelConfig":
        v = self.violations()
        if v:
            raise ConfigError("invalid model config:\n  " + "\n  ".join(v))
        return self

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            lines.append(f"{f.name}={format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        values, unknown = parse_pairs(text, {f.name for f in dataclasses.fields(cls)})
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls.from_dict(values)

    @classmethod
    def from_dict(cls, values: dict[str, str]) -> "ModelConfig":
        kw = {}
        types = {f.name: f for f in dataclasses.fields(cls)}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            kw[key] = coerce(key, raw, getattr(cls(), key))
        return cls(**kw)


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, ContextWindow):
        return v.spec()
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def coerce(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, ContextWindow):
            return ContextWindow.parse(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_pairs(text: str, known: set[str]) -> tuple[dict[str, str], set[str]]:
    """Split ``key=value`` lines; ``#`` starts a comment. Returns (known pairs, unknown keys)."""
    values, unknown = {}, set()
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key in known:
            values[key] = val
        else:
            unknown.add(key)
    return values, unknown
