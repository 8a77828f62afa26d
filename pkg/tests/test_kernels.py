import os
import subprocess
import sys

import numpy as np
import pytest

from streamxl.kernels import _numba, _numpy

BACKENDS = [pytest.param(_numpy, id="numpy"), pytest.param(_numba, id="numba")]


def conv2d_loop(x, w, stride, pad):
    t, f, c = x.shape
    kt, kf, _, co = w.shape
    to = (t + 2 * pad[0] - kt) // stride[0] + 1
    fo = (f + 2 * pad[1] - kf) // stride[1] + 1
    out = np.zeros((to, fo, co))
    for a in range(to):
        for b in range(fo):
            for i in range(kt):
                for j in range(kf):
                    st, sf = a * stride[0] + i - pad[0], b * stride[1] + j - pad[1]
                    if 0 <= st < t and 0 <= sf < f:
                        out[a, b] += x[st, sf] @ w[i, j]
    return out


def conv1d_loop(x, w, pad):
    k = w.shape[0]
    to = x.shape[0] + 2 * pad - k + 1
    out = np.zeros((to, w.shape[2]))
    for i in range(to):
        for j in range(k):
            s = i + j - pad
            if 0 <= s < x.shape[0]:
                out[i] += x[s] @ w[j]
    return out


def softmax_loop(x, mask):
    out = np.zeros_like(x)
    for r in range(x.shape[0]):
        idx = [j for j in range(x.shape[1]) if mask is None or mask[r, j]]
        m = max(x[r, j] for j in idx)
        e = {j: np.exp(x[r, j] - m) for j in idx}
        s = sum(e.values())
        for j in idx:
            out[r, j] = e[j] / s
    return out


@pytest.mark.parametrize("impl", BACKENDS)
@pytest.mark.parametrize("stride", [(1, 1), (2, 1), (1, 2)])
def test_conv2d_forward_matches_loop(impl, stride, rng):
    x, w = rng.standard_normal((7, 6, 3)), rng.standard_normal((3, 3, 3, 4))
    assert np.abs(impl.conv2d_forward(x, w, stride, (1, 1)) - conv2d_loop(x, w, stride, (1, 1))).max() <= 1e-12


@pytest.mark.parametrize("impl", BACKENDS)
def test_conv2d_backward_is_adjoint(impl, rng):
    # <conv(x), g> = <x, dx> and = <w, dw> for a linear map
    x, w = rng.standard_normal((6, 5, 2)), rng.standard_normal((3, 3, 2, 3))
    y = impl.conv2d_forward(x, w, (1, 1), (1, 1))
    g = rng.standard_normal(y.shape)
    dx, dw = impl.conv2d_backward(x, w, g, (1, 1), (1, 1))
    assert abs((y * g).sum() - (x * dx).sum()) <= 1e-10
    assert abs((y * g).sum() - (w * dw).sum()) <= 1e-10


@pytest.mark.parametrize("impl", BACKENDS)
def test_conv1d_forward_and_backward(impl, rng):
    x, w = rng.standard_normal((8, 4)), rng.standard_normal((3, 4, 5))
    y = impl.conv1d_forward(x, w, 1)
    assert np.abs(y - conv1d_loop(x, w, 1)).max() <= 1e-12
    g = rng.standard_normal(y.shape)
    dx, dw = impl.conv1d_backward(x, w, g, 1)
    assert abs((y * g).sum() - (x * dx).sum()) <= 1e-10
    assert abs((y * g).sum() - (w * dw).sum()) <= 1e-10


@pytest.mark.parametrize("impl", BACKENDS)
def test_maxpool_forward_backward(impl, rng):
    x = rng.standard_normal((5, 6, 2))
    out, arg = impl.maxpool2d_forward(x, (2, 3))
    ref = x[:4].reshape(2, 2, 2, 3, 2).max(axis=(1, 3))
    assert np.array_equal(out, ref)
    g = rng.standard_normal(out.shape)
    dx = impl.maxpool2d_backward(g, arg, x.shape, (2, 3))
    expect = np.zeros_like(x)
    for a in range(2):
        for b in range(2):
            for c in range(2):
                win = x[2 * a:2 * a + 2, 3 * b:3 * b + 3, c]
                i, j = np.unravel_index(np.argmax(win), win.shape)
                expect[2 * a + i, 3 * b + j, c] = g[a, b, c]
    assert np.array_equal(dx, expect)


@pytest.mark.parametrize("impl", BACKENDS)
def test_masked_softmax_matches_loop(impl, rng):
    x = rng.standard_normal((6, 9)) * 5
    mask = rng.random((6, 9)) < 0.5
    mask[:, 4] = True
    assert np.abs(impl.masked_softmax(x, mask) - softmax_loop(x, mask)).max() <= 1e-15
    assert np.abs(impl.masked_softmax(x, None) - softmax_loop(x, None)).max() <= 1e-15


def test_backends_agree(rng):
    x, w = rng.standard_normal((9, 8, 3)), rng.standard_normal((3, 3, 3, 3))
    a = _numpy.conv2d_forward(x, w, (1, 1), (1, 1))
    b = _numba.conv2d_forward(x, w, (1, 1), (1, 1))
    assert np.abs(a - b).max() <= 1e-12


def _backend_in_subprocess(value):
    env = dict(os.environ, STREAMXL_BACKEND=value)
    return subprocess.run([sys.executable, "-c", "import streamxl.kernels as k; print(k.BACKEND)"],
                          env=env, capture_output=True, text=True)


def test_env_flag_selects_numpy_fallback():
    r = _backend_in_subprocess("numpy")
    assert r.returncode == 0 and r.stdout.strip() == "numpy"


def test_env_flag_rejects_unknown_backend():
    r = _backend_in_subprocess("cuda")
    assert r.returncode != 0 and "STREAMXL_BACKEND" in r.stderr
