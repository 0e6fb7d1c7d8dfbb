"""Time the numba kernels against the pure-numpy fallback.

    python3 bench/bench_kernels.py [--n 200000] [--repeat 5]

The dispatch flag is read on every call, so both paths run in one process.
The first numba call (compilation) is excluded.
"""

import argparse
import os
import time

import numpy as np

from peerfx import _accel


def _time(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(n, rng):
    # two crossed factors, sizes similar to provider-month-group x season
    a = rng.integers(0, n // 50, n)
    b = rng.integers(0, 40, n) + a.max() + 1
    codes = np.vstack([a, b]).astype(np.int64)
    counts = np.bincount(codes.ravel()).astype(float)
    x = rng.normal(size=n) + 0.1 * a

    def demean():
        _accel.demean_inplace(x.copy(), codes, counts, 1e-8, 10_000)

    pool = np.sort(np.round(rng.random(n), 4))
    ids = np.arange(n, dtype=np.int64)
    targets = rng.random(n // 10)

    def knn():
        _accel.knn_sorted(pool, ids, targets, 3)

    sizes = rng.integers(5, 30, n // 12)
    stops = np.cumsum(sizes)
    starts = stops - sizes
    values = rng.random(stops[-1])

    def loo():
        _accel.loo_moments_sorted(values, starts, stops)

    return {"demean (2 factors)": demean, "knn k=3": knn, "loo moments": loo}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=200_000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    fns = cases(args.n, np.random.default_rng(0))
    print(f"n={args.n}, best of {args.repeat}")
    print(f"{'kernel':<20}{'numba s':>10}{'numpy s':>10}{'speedup':>10}")
    for name, fn in fns.items():
        os.environ["PEERFX_NO_JIT"] = "0"
        fn()  # compile
        t_jit = _time(fn, args.repeat)
        os.environ["PEERFX_NO_JIT"] = "1"
        t_np = _time(fn, args.repeat)
        print(f"{name:<20}{t_jit:>10.4f}{t_np:>10.4f}{t_np / t_jit:>9.1f}x")
    os.environ.pop("PEERFX_NO_JIT")


if __name__ == "__main__":
    main()
