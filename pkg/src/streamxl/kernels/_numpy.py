"""Pure-numpy reference kernels.

Every function here has a twin in ``_numba`` with an identical signature.
Results agree to f64 rounding; the summation order differs.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv1d_forward(x, w, pad):
    """Stride-1 temporal convolution. ``x`` is [T, d], ``w`` is [k, d, d_out]."""
    k = w.shape[0]
    t = x.shape[0]
    xp = np.zeros((t + 2 * pad, x.shape[1]), dtype=x.dtype)
    xp[pad:pad + t] = x
    t_out = t + 2 * pad - k + 1
    out = np.zeros((t_out, w.shape[2]), dtype=x.dtype)
    for j in range(k):
        out += xp[j:j + t_out] @ w[j]
    return out


def conv1d_backward(x, w, g, pad):
    k = w.shape[0]
    t = x.shape[0]
    t_out = g.shape[0]
    xp = np.zeros((t + 2 * pad, x.shape[1]), dtype=x.dtype)
    xp[pad:pad + t] = x
    dxp = np.zeros_like(xp)
    dw = np.empty_like(w)
    for j in range(k):
        dw[j] = xp[j:j + t_out].T @ g
        dxp[j:j + t_out] += g @ w[j].T
    return dxp[pad:pad + t], dw


def _pad2d(x, pad):
    t, f, c = x.shape
    xp = np.zeros((t + 2 * pad[0], f + 2 * pad[1], c), dtype=x.dtype)
    xp[pad[0]:pad[0] + t, pad[1]:pad[1] + f] = x
    return xp


def conv2d_forward(x, w, stride, pad):
    """2-D convolution over (time, freq). ``x`` is [T, F, C], ``w`` is [kt, kf, C, C_out]."""
    kt, kf = w.shape[:2]
    xp = _pad2d(x, pad)
    # windows: [T', F', C, kt, kf]
    win = sliding_window_view(xp, (kt, kf), axis=(0, 1))[::stride[0], ::stride[1]]
    return np.einsum("tfcij,ijco->tfo", win, w, optimize=True)


def conv2d_backward(x, w, g, stride, pad):
    kt, kf = w.shape[:2]
    xp = _pad2d(x, pad)
    win = sliding_window_view(xp, (kt, kf), axis=(0, 1))[::stride[0], ::stride[1]]
    dw = np.einsum("tfcij,tfo->ijco", win, g, optimize=True)
    dxp = np.zeros_like(xp)
    t_out, f_out = g.shape[:2]
    for i in range(kt):
        for j in range(kf):
            contrib = g @ w[i, j].T  # [T', F', C]
            dxp[i:i + stride[0] * (t_out - 1) + 1:stride[0],
                j:j + stride[1] * (f_out - 1) + 1:stride[1]] += contrib
    t, f = x.shape[:2]
    return dxp[pad[0]:pad[0] + t, pad[1]:pad[1] + f], dw


def maxpool2d_forward(x, factor):
    """Non-overlapping max pooling; trailing remainders are dropped."""
    pt, pf = factor
    t, f, c = x.shape
    to, fo = t // pt, f // pf
    blocks = x[:to * pt, :fo * pf].reshape(to, pt, fo, pf, c).transpose(0, 2, 4, 1, 3)
    blocks = blocks.reshape(to, fo, c, pt * pf)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, arg


def maxpool2d_backward(g, arg, in_shape, factor):
    pt, pf = factor
    t, f, c = in_shape
    to, fo = g.shape[:2]
    blocks = np.zeros((to, fo, c, pt * pf), dtype=g.dtype)
    np.put_along_axis(blocks, arg[..., None], g[..., None], axis=-1)
    blocks = blocks.reshape(to, fo, c, pt, pf).transpose(0, 3, 1, 4, 2)
    dx = np.zeros(in_shape, dtype=g.dtype)
    dx[:to * pt, :fo * pf] = blocks.reshape(to * pt, fo * pf, c)
    return dx


def masked_softmax(x, mask):
    """Row softmax over the last axis of a 2-D array; masked entries get exactly 0."""
    if mask is None:
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
    else:
        xm = np.where(mask, x, -np.inf)
        z = xm - xm.max(axis=-1, keepdims=True)
        e = np.where(mask, np.exp(z), 0.0)
    return e / e.sum(axis=-1, keepdims=True)
