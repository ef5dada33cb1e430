"""Compare the compiled kernels against the NumPy fallback.

Run:  python3 benchmarks/bench_kernels.py [--grid 32] [--channels 16]
"""

import argparse
import time

import numpy as np

from descfields.diffmath import backend


def timeit(fn, budget=0.6):
    fn()
    t0 = time.perf_counter()
    it = 0
    while time.perf_counter() - t0 < budget:
        fn()
        it += 1
    return (time.perf_counter() - t0) / it


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--grid", type=int, default=32)
    ap.add_argument("--channels", type=int, default=16)
    ap.add_argument("--queries", type=int, default=4096)
    args = ap.parse_args()

    r, c = args.grid, args.channels
    rng = np.random.default_rng(0)
    x = rng.normal(size=(r, r, r, c)).astype(np.float32)
    w = rng.normal(size=(27, c, c)).astype(np.float32) * 0.1
    b = np.zeros(c, np.float32)
    gy = rng.normal(size=(r, r, r, c)).astype(np.float32)
    coords = rng.uniform(0, r - 1, size=(args.queries, 3))
    gq = rng.normal(size=(args.queries, c)).astype(np.float32)

    cases = {
        "conv3d_fwd": lambda k: k.conv3d_fwd(x, w, b),
        "conv3d_bwd_w": lambda k: k.conv3d_bwd_weights(x, gy),
        "trilinear_fwd": lambda k: k.trilinear_fwd(x, coords),
        "trilinear_bwd": lambda k: k.trilinear_bwd(x, coords, gq),
    }

    avail = backend.backends()
    print(f"grid {r}^3, {c} channels, {args.queries} queries")
    print(f"{'kernel':<16}" + "".join(f"{name:>12}" for name in avail) + f"{'speedup':>10}")
    for case, fn in cases.items():
        times = {name: timeit(lambda k=k: fn(k)) for name, k in avail.items()}
        row = f"{case:<16}" + "".join(f"{times[n]*1e3:>10.2f}ms" for n in avail)
        if "native" in times:
            row += f"{times['numpy'] / times['native']:>9.1f}x"
        print(row)
    gf = 2 * r**3 * 27 * c * c / timeit(lambda: avail[max(avail)].conv3d_fwd(x, w, b)) / 1e9
    print(f"\nconv3d_fwd on '{max(avail)}': {gf:.1f} GFLOP/s")


if __name__ == "__main__":
    main()
