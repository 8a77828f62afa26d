"""Feature/posterior container and the combined training config file.

Feature file layout, little-endian, 20-byte header then payload::

    bytes 0-3   magic  b"SXLF"
    bytes 4-7   u32    version (1)
    bytes 8-11  u32    frame count T
    bytes 12-15 u32    feature dim d
    bytes 16-19 f32    frame period in milliseconds
    bytes 20-   f32    T*d values, row-major
"""

from __future__ import annotations

import dataclasses
import struct
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ModelConfig, coerce, parse_pairs
from .errors import ConfigError, FormatError
from .trainer import Schedule

FEATURE_MAGIC = b"SXLF"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIIIf")


@dataclass
class FeatureFile:
    data: np.ndarray
    frame_period_ms: float = 10.0

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2 or self.data.shape[1] < 1:
            raise FormatError(f"feature payload must be [T, d] with d >= 1, got {self.data.shape}")
        if not self.frame_period_ms > 0:
            raise FormatError("frame period must be positive")

    @property
    def frame_count(self) -> int:
        return self.data.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.data.shape[1]

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, self.frame_count, self.feature_dim,
                            float(self.frame_period_ms))
        return head + np.ascontiguousarray(self.data, dtype="<f4").tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes, source: str = "<bytes>") -> "FeatureFile":
        if len(buf) < _HEADER.size:
            raise FormatError(f"{source}: truncated header ({len(buf)} bytes)")
        magic, version, t, d, period = _HEADER.unpack_from(buf)
        if magic != FEATURE_MAGIC:
            raise FormatError(f"{source}: bad magic {magic!r}")
        if version != FEATURE_VERSION:
            raise FormatError(f"{source}: unsupported version {version}")
        if d == 0 or not period > 0:
            raise FormatError(f"{source}: feature dim and frame period must be positive")
        expected = t * d * 4
        payload = buf[_HEADER.size:]
        if len(payload) != expected:
            raise FormatError(f"{source}: payload is {len(payload)} bytes, header implies {expected}")
        data = np.frombuffer(payload, dtype="<f4").reshape(t, d).astype(np.float32)
        return cls(data, period)

    def write(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def read(cls, path) -> "FeatureFile":
        return cls.from_bytes(Path(path).read_bytes(), str(path))


class FeatureWriter:
    """Append rows to a feature file as they arrive; the header is patched on close."""

    def __init__(self, path, dim: int, frame_period_ms: float):
        self.fh = open(path, "wb")
        self.dim = dim
        self.period = frame_period_ms
        self.rows = 0
        self.fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, 0, dim, float(frame_period_ms)))

    def write_rows(self, rows: np.ndarray) -> None:
        rows = np.atleast_2d(rows)
        if rows.shape[1] != self.dim:
            raise FormatError(f"row width {rows.shape[1]} != {self.dim}")
        self.fh.write(np.ascontiguousarray(rows, dtype="<f4").tobytes())
        self.rows += rows.shape[0]

    def close(self) -> None:
        self.fh.seek(0)
        self.fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, self.rows, self.dim, float(self.period)))
        self.fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


SCHEDULE_KEYS = {f.name for f in dataclasses.fields(Schedule)}
MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)}


def parse_config_file(text: str, notice=None) -> tuple[ModelConfig, Schedule]:
    """Parse ``key=value`` lines covering model and schedule fields.

    Unknown keys are rejected. Keys left out take their defaults and are
    listed through ``notice`` (stderr by default).
    """
    values, unknown = parse_pairs(text, MODEL_KEYS | SCHEDULE_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    model_vals = {k: v for k, v in values.items() if k in MODEL_KEYS}
    sched_defaults = Schedule()
    sched_kw = {k: coerce(k, v, getattr(sched_defaults, k)) for k, v in values.items() if k in SCHEDULE_KEYS}
    defaulted = sorted((MODEL_KEYS | SCHEDULE_KEYS) - set(values))
    if defaulted:
        msg = "config: using defaults for " + ", ".join(defaulted)
        (notice or (lambda m: print(m, file=sys.stderr)))(msg)
    return ModelConfig.from_dict(model_vals).validate(), Schedule(**sched_kw)


def read_config_file(path, notice=None) -> tuple[ModelConfig, Schedule]:
    return parse_config_file(Path(path).read_text(encoding="utf-8"), notice)


def format_config_file(config: ModelConfig, schedule: Schedule) -> str:
    from .config import format_value

    lines = [config.to_text().rstrip("\n")]
    for f in dataclasses.fields(schedule):
        lines.append(f"{f.name}={format_value(getattr(schedule, f.name))}")
    return "\n".join(lines) + "\n"
