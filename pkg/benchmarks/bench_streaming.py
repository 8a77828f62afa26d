"""Per-emission cost of chunked XL streaming vs prefix-recomputing masked streaming.

Usage: python benchmarks/bench_streaming.py [--chunks N] [--chunk C]

XL work per chunk stays flat as the stream grows; the masked model has to
recompute every lookahead-dependent state, so its cost per emission grows
with the stream length.
"""

import argparse

import numpy as np

from streamxl.diagnostics import masked_emission_times, xl_cost_profile


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--chunks", type=int, default=100)
    ap.add_argument("--chunk", type=int, default=40)
    ap.add_argument("--layers", type=int, default=4)
    ap.add_argument("--d-model", type=int, default=128)
    args = ap.parse_args()

    prof = xl_cost_profile(args.chunks, args.chunk, args.layers, args.d_model)
    masked = masked_emission_times(args.chunks * args.chunk, hop=args.chunk, n_layers=args.layers,
                                   d_model=args.d_model)
    print("chunk\txl_ms\tmasked_ms")
    for i in sorted({1, 9, 24, 49, 74, len(prof.times)}):
        if i <= len(prof.times) and i <= len(masked):
            print(f"{i + 1}\t{1e3 * prof.times[i - 1]:.3f}\t{1e3 * masked[i - 1]:.3f}")
    print(f"# xl: median {1e3 * prof.reference:.3f} ms/chunk, worst deviation "
          f"{100 * prof.worst_deviation:.1f}% over chunks 2..{args.chunks}")
    growth = np.median(masked[-5:]) / np.median(masked[:5])
    print(f"# masked: last/first emission cost ratio {growth:.1f}x")


if __name__ == "__main__":
    main()
