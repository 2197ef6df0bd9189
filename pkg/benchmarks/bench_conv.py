"""Time the numba and pure-numpy convolution kernels on SDANet-sized layers.

    python3 benchmarks/bench_conv.py [--repeat 5]
"""
import argparse
import time

import numpy as np

from sdanet import _kernels

# (label, N, C, H, W, O, k, dilation) drawn from the default model on a 32x32 patch
CASES = [
    ("lfe 1x1 reduce", 1, 64, 32, 32, 8, 1, 1),
    ("lfe 7x7 branch", 1, 8, 32, 32, 16, 7, 2),
    ("hfe 3x3 dense", 1, 128, 32, 32, 64, 3, 1),
    ("head 3x3", 1, 64, 32, 32, 1, 3, 1),
]


def _best(fn, repeat):
    fn()  # warm-up, also triggers numba compilation
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"{'layer':<16} {'backend':<6} {'forward ms':>11} {'backward ms':>12}")
    for label, n, c, h, w, o, k, d in CASES:
        x, wt, b = rng.normal(size=(n, c, h, w)), rng.normal(size=(o, c, k, k)), rng.normal(size=o)
        g = rng.normal(size=(n, o, h, w))
        pad = d * (k - 1) // 2
        for name, (fwd, bwd) in sorted(_kernels.BACKENDS.items()):
            tf = _best(lambda: fwd(x, wt, b, d, pad), args.repeat)
            tb = _best(lambda: bwd(x, wt, g, d, pad), args.repeat)
            print(f"{label:<16} {name:<6} {tf * 1e3:>11.2f} {tb * 1e3:>12.2f}")


if __name__ == "__main__":
    main()
