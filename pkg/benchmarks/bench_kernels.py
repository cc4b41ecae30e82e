"""Time the numba and numpy paths of the hot loops in ``lem.kernels``.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--bars 500000] [--windows 20000]
"""
import argparse
import os
import timeit

import numpy as np

from lem import kernels
from lem.evaluation import path_table


def cases(bars, windows, horizon, seed=0):
    rng = np.random.default_rng(seed)
    volume = rng.exponential(1.0, bars) * (rng.random(bars) > 0.05)
    close = 100 * np.exp(np.cumsum(rng.normal(0, 1e-3, bars)))
    quote = volume * close * (1 + rng.normal(0, 1e-4, bars))
    raw = rng.exponential(1.0, (windows, horizon, (horizon + 1) * 8))
    alloc = raw / raw.sum(axis=1, keepdims=True)
    prices = 100 * np.exp(np.cumsum(rng.normal(0, 1e-3, (windows, horizon)), axis=1))
    vols = rng.exponential(1.0, (windows, horizon))
    min_period, alloc_type, vwap = path_table(horizon)
    return {
        "bar_vwap": lambda: kernels.bar_vwap(volume, quote, close),
        "rolling_normalize": lambda: kernels.rolling_normalize(volume, 2880, 6),
        "execute_paths": lambda: kernels.execute_paths(alloc, prices, vols, min_period, alloc_type, vwap),
    }


def best_time(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--bars", type=int, default=500_000)
    ap.add_argument("--windows", type=int, default=20_000)
    ap.add_argument("--horizon", type=int, default=12)
    args = ap.parse_args()
    if not kernels.HAVE_NUMBA:
        raise SystemExit("numba is not installed")

    fns = cases(args.bars, args.windows, args.horizon)
    print(f"{'kernel':20s} {'numpy [ms]':>11s} {'numba [ms]':>11s} {'speed-up':>9s}")
    for name, fn in fns.items():
        os.environ["LEM_NUMBA"] = "0"
        slow = best_time(fn, args.repeat)
        os.environ["LEM_NUMBA"] = "1"
        fn()  # compile outside the timed runs
        fast = best_time(fn, args.repeat)
        print(f"{name:20s} {slow * 1e3:11.2f} {fast * 1e3:11.2f} {slow / fast:8.1f}x")


if __name__ == "__main__":
    main()
