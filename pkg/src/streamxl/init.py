"""Xavier-uniform and depth-scaled uniform initialization.

Random streams come from numpy's PCG64 bit generator. Each matrix gets its
own stream, derived from ``SeedSequence([seed, crc32(name)])`` so parameters
can be sampled independently and in any order.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

SCHEMES = ("xavier_uniform", "depth_scale")


@dataclass(frozen=True)
class InitSpec:
    scheme: str
    layer_index: int
    d_in: int
    d_out: int
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown init scheme {self.scheme!r}; choose from {SCHEMES}")
        if self.layer_index < 1:
            raise ConfigError(f"layer index must be >= 1, got {self.layer_index}")
        if self.d_in < 1 or self.d_out < 1:
            raise ConfigError(f"dimensions must be positive, got {self.d_in}x{self.d_out}")


def xavier_gamma(d_in: int, d_out: int) -> float:
    return math.sqrt(6.0 / (d_in + d_out))


def init_bound(spec: InitSpec) -> float:
    gamma = xavier_gamma(spec.d_in, spec.d_out)
    if spec.scheme == "depth_scale":
        return gamma / math.sqrt(spec.layer_index)
    return gamma


def rng_for(seed: int, name: str) -> np.random.Generator:
    """Independent generator for the parameter called ``name``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())])))


def sample_matrix(spec: InitSpec, shape=None, name: str = "", dtype=np.float64) -> np.ndarray:
    """I.i.d. U(-b, b) samples with b = init_bound(spec).

    ``shape`` defaults to (d_in, d_out); conv kernels pass their own shape and
    encode fan-in/fan-out through ``d_in``/``d_out``.
    """
    b = init_bound(spec)
    shape = (spec.d_in, spec.d_out) if shape is None else tuple(shape)
    rng = rng_for(spec.seed, name)
    # uniform on [-b, b); nudge the closed lower end into the open interval
    w = rng.uniform(-b, b, size=shape)
    w[w == -b] = 0.0
    return w.astype(dtype, copy=False)


def ks_uniform(samples: np.ndarray, bound: float) -> float:
    """Kolmogorov-Smirnov statistic of ``samples`` against U(-bound, bound)."""
    x = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    n = x.size
    cdf = np.clip((x + bound) / (2 * bound), 0.0, 1.0)
    i = np.arange(1, n + 1)
    return float(max((i / n - cdf).max(), (cdf - (i - 1) / n).max()))


def ks_critical(n: int, alpha: float = 0.01) -> float:
    """Asymptotic one-sample KS critical value."""
    return math.sqrt(-0.5 * math.log(alpha / 2)) / math.sqrt(n)
