"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is chosen once at import time. Set ``STREAMXL_BACKEND=numpy``
to force the fallback; the default is ``numba`` when it imports cleanly.
Both implementation modules stay importable so tests and benchmarks can
compare them directly.
"""

import os

import numpy as np

from . import _numpy

try:
    from . import _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

_requested = os.environ.get("STREAMXL_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ValueError(f"STREAMXL_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

BACKEND = "numba" if (_requested == "numba" and _numba is not None) else "numpy"
_impl = _numba if BACKEND == "numba" else _numpy


def _c(a):
    return np.ascontiguousarray(a)


def conv1d_forward(x, w, pad):
    return _impl.conv1d_forward(_c(x), _c(w), int(pad))


def conv1d_backward(x, w, g, pad):
    return _impl.conv1d_backward(_c(x), _c(w), _c(g), int(pad))


def conv2d_forward(x, w, stride, pad):
    return _impl.conv2d_forward(_c(x), _c(w), tuple(stride), tuple(pad))


def conv2d_backward(x, w, g, stride, pad):
    return _impl.conv2d_backward(_c(x), _c(w), _c(g), tuple(stride), tuple(pad))


def maxpool2d_forward(x, factor):
    return _impl.maxpool2d_forward(_c(x), tuple(factor))


def maxpool2d_backward(g, arg, in_shape, factor):
    return _impl.maxpool2d_backward(_c(g), _c(arg), tuple(in_shape), tuple(factor))


def masked_softmax(x, mask):
    x = _c(x)
    if x.ndim != 2:
        flat = x.reshape(-1, x.shape[-1])
        m = None if mask is None else _c(np.broadcast_to(mask, x.shape)).reshape(flat.shape)
        return _impl.masked_softmax(flat, m).reshape(x.shape)
    return _impl.masked_softmax(x, None if mask is None else _c(mask))


__all__ = [
    "BACKEND",
    "conv1d_forward",
    "conv1d_backward",
    "conv2d_forward",
    "conv2d_backward",
    "maxpool2d_forward",
    "maxpool2d_backward",
    "masked_softmax",
]
