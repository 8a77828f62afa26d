"""Loop kernels compiled with numba; signatures mirror ``_numpy``."""

import numpy as np
from numba import njit


# Convolutions gather input patches into a column matrix with compiled
# loops, then hand the contraction to BLAS through np.dot.


@njit(cache=True)
def _cols1d(x, k, pad, t_out):
    t, d = x.shape
    cols = np.zeros((t_out, k * d), dtype=x.dtype)
    for i in range(t_out):
        for j in range(k):
            src = i + j - pad
            if src < 0 or src >= t:
                continue
            for a in range(d):
                cols[i, j * d + a] = x[src, a]
    return cols


@njit(cache=True)
def conv1d_forward(x, w, pad):
    k, d, d_out = w.shape
    t_out = x.shape[0] + 2 * pad - k + 1
    cols = _cols1d(x, k, pad, t_out)
    return np.dot(cols, np.ascontiguousarray(w).reshape(k * d, d_out))


@njit(cache=True)
def conv1d_backward(x, w, g, pad):
    k, d, d_out = w.shape
    t = x.shape[0]
    t_out = g.shape[0]
    cols = _cols1d(x, k, pad, t_out)
    w2 = np.ascontiguousarray(w).reshape(k * d, d_out)
    dw = np.dot(cols.T, g).reshape(k, d, d_out)
    dcols = np.dot(g, w2.T)
    dx = np.zeros_like(x)
    for i in range(t_out):
        for j in range(k):
            src = i + j - pad
            if src < 0 or src >= t:
                continue
            for a in range(d):
                dx[src, a] += dcols[i, j * d + a]
    return dx, dw


@njit(cache=True)
def _cols2d(x, kt, kf, stride, pad, t_out, f_out):
    t, f, c = x.shape
    cols = np.zeros((t_out * f_out, kt * kf * c), dtype=x.dtype)
    for ti in range(t_out):
        for fi in range(f_out):
            r = ti * f_out + fi
            for i in range(kt):
                src_t = ti * stride[0] + i - pad[0]
                if src_t < 0 or src_t >= t:
                    continue
                for j in range(kf):
                    src_f = fi * stride[1] + j - pad[1]
                    if src_f < 0 or src_f >= f:
                        continue
                    base = (i * kf + j) * c
                    for a in range(c):
                        cols[r, base + a] = x[src_t, src_f, a]
    return cols


@njit(cache=True)
def conv2d_forward(x, w, stride, pad):
    t, f, c = x.shape
    kt, kf, _, c_out = w.shape
    t_out = (t + 2 * pad[0] - kt) // stride[0] + 1
    f_out = (f + 2 * pad[1] - kf) // stride[1] + 1
    cols = _cols2d(x, kt, kf, stride, pad, t_out, f_out)
    out = np.dot(cols, np.ascontiguousarray(w).reshape(kt * kf * c, c_out))
    return out.reshape(t_out, f_out, c_out)


@njit(cache=True)
def conv2d_backward(x, w, g, stride, pad):
    t, f, c = x.shape
    kt, kf, _, c_out = w.shape
    t_out, f_out = g.shape[0], g.shape[1]
    cols = _cols2d(x, kt, kf, stride, pad, t_out, f_out)
    g2 = np.ascontiguousarray(g).reshape(t_out * f_out, c_out)
    dw = np.dot(cols.T, g2).reshape(kt, kf, c, c_out)
    dcols = np.dot(g2, np.ascontiguousarray(w).reshape(kt * kf * c, c_out).T)
    dx = np.zeros_like(x)
    for ti in range(t_out):
        for fi in range(f_out):
            r = ti * f_out + fi
            for i in range(kt):
                src_t = ti * stride[0] + i - pad[0]
                if src_t < 0 or src_t >= t:
                    continue
                for j in range(kf):
                    src_f = fi * stride[1] + j - pad[1]
                    if src_f < 0 or src_f >= f:
                        continue
                    base = (i * kf + j) * c
                    for a in range(c):
                        dx[src_t, src_f, a] += dcols[r, base + a]
    return dx, dw


@njit(cache=True)
def maxpool2d_forward(x, factor):
    pt, pf = factor
    t, f, c = x.shape
    to, fo = t // pt, f // pf
    out = np.empty((to, fo, c), dtype=x.dtype)
    arg = np.empty((to, fo, c), dtype=np.int64)
    for ti in range(to):
        for fi in range(fo):
            for a in range(c):
                best = x[ti * pt, fi * pf, a]
                best_k = 0
                for i in range(pt):
                    for j in range(pf):
                        v = x[ti * pt + i, fi * pf + j, a]
                        if v > best:
                            best = v
                            best_k = i * pf + j
                out[ti, fi, a] = best
                arg[ti, fi, a] = best_k
    return out, arg


@njit(cache=True)
def maxpool2d_backward(g, arg, in_shape, factor):
    pt, pf = factor
    dx = np.zeros(in_shape, dtype=g.dtype)
    to, fo, c = g.shape
    for ti in range(to):
        for fi in range(fo):
            for a in range(c):
                k = arg[ti, fi, a]
                dx[ti * pt + k // pf, fi * pf + k % pf, a] += g[ti, fi, a]
    return dx


@njit(cache=True)
def _softmax_rows(x, mask, use_mask):
    n, m = x.shape
    out = np.zeros_like(x)
    for r in range(n):
        mx = -np.inf
        for j in range(m):
            if (not use_mask or mask[r, j]) and x[r, j] > mx:
                mx = x[r, j]
        s = 0.0
        for j in range(m):
            if not use_mask or mask[r, j]:
                e = np.exp(x[r, j] - mx)
                out[r, j] = e
                s += e
        for j in range(m):
            out[r, j] /= s
    return out


def masked_softmax(x, mask):
    if mask is None:
        return _softmax_rows(x, np.ones((1, 1), dtype=np.bool_), False)
    return _softmax_rows(x, mask, True)
