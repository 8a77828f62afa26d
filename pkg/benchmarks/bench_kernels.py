"""Time the numba kernels against the pure-numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat N] [--frames T]

Shapes follow the default VGG front-end on 80-dim features and one
attention score matrix. Both backends are checked for agreement first.
"""

import argparse
import timeit

import numpy as np

from streamxl.kernels import _numba, _numpy


def cases(frames: int, rng):
    x2 = rng.standard_normal((frames // 2, 40, 32))
    w2 = rng.standard_normal((3, 3, 32, 32))
    g2 = rng.standard_normal((frames // 2, 40, 32))
    x1 = rng.standard_normal((frames, 64))
    w1 = rng.standard_normal((3, 64, 64))
    g1 = rng.standard_normal((frames, 64))
    scores = rng.standard_normal((frames, frames))
    mask = np.tril(np.ones((frames, frames), dtype=bool), 3)
    pool_in = rng.standard_normal((frames, 80, 32))
    return {
        "conv2d_forward": lambda m: m.conv2d_forward(x2, w2, (1, 1), (1, 1)),
        "conv2d_backward": lambda m: m.conv2d_backward(x2, w2, g2, (1, 1), (1, 1)),
        "conv1d_forward": lambda m: m.conv1d_forward(x1, w1, 1),
        "conv1d_backward": lambda m: m.conv1d_backward(x1, w1, g1, 1),
        "maxpool2d_forward": lambda m: m.maxpool2d_forward(pool_in, (2, 2)),
        "masked_softmax": lambda m: m.masked_softmax(scores, mask),
    }


def _flat(r):
    return [np.asarray(a) for a in (r if isinstance(r, tuple) else (r,))]


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--frames", type=int, default=200)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print("kernel\tnumpy_ms\tnumba_ms\tspeedup\tmax_abs_diff")
    for name, fn in cases(args.frames, rng).items():
        a, b = _flat(fn(_numpy)), _flat(fn(_numba))  # also compiles the numba path
        diff = max(float(np.abs(u - v).max()) for u, v in zip(a, b))
        t_np = min(timeit.repeat(lambda: fn(_numpy), number=1, repeat=args.repeat))
        t_nb = min(timeit.repeat(lambda: fn(_numba), number=1, repeat=args.repeat))
        print(f"{name}\t{1e3 * t_np:.3f}\t{1e3 * t_nb:.3f}\t{t_np / t_nb:.2f}x\t{diff:.1e}")


if __name__ == "__main__":
    main()
