"""Compare the numba and numpy kernel backends on the solver's hot loops.

Run from the repository root:

    python benchmarks/bench_kernels.py [--K 3] [--T 200] [--repeat 20]

Prints the best-of-``repeat`` time per call for each kernel and backend, the
speed-up, and the largest relative disagreement between the two backends.  The
numba timings exclude JIT compilation (one warm-up call per kernel).
"""
import argparse
import time

import numpy as np

from iscc_vfeel import _kernels


def _inputs(K, T, seed=0):
    rng = np.random.default_rng(seed)
    h = rng.rayleigh(np.sqrt(1e-3 / 2), (K, T))
    mse = (h, rng.uniform(0, 2, (K, T)), rng.uniform(0.01, 0.05, (K, T)), rng.uniform(0.1, 3, T),
           rng.uniform(0, 1e-3, K), 1e-9, 1e-9, 1.0)
    tx = (rng.uniform(0.1, 2, (K, T)), rng.uniform(0.1, 2, (K, T)), rng.uniform(0.01, 1, (K, T)),
          rng.uniform(0.5, 3, (K, T)), np.full(K, 1e-2), 1e-3)
    p11 = (rng.uniform(0.1, 1, T), np.ones(T), np.full(T, 5000.0), rng.uniform(0.01, 0.1, K),
           np.full(K, 4e-3), rng.uniform(0, 0.1, K), np.full(K, 1000.0))
    return {"mse_terms": mse, "tx_power": tx, "p11_dual": p11}


def _time(fn, args, repeat):
    fn(*args)  # warm-up (numba compiles here)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def _max_rel(a, b):
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    scale = np.maximum(np.abs(b), 1e-300)
    return float(np.max(np.abs(a - b) / scale))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--K", type=int, default=3)
    ap.add_argument("--T", type=int, default=200)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    if "numba" not in _kernels.KERNELS:
        print("numba is not installed; only the numpy backend is available")
        return 1
    inputs = _inputs(args.K, args.T)
    print(f"K={args.K} T={args.T} best of {args.repeat}; active backend: {_kernels.BACKEND}")
    print(f"{'kernel':<10} {'numpy [ms]':>11} {'numba [ms]':>11} {'speed-up':>9} {'max rel diff':>13}")
    for name, kargs in inputs.items():
        times, outs = {}, {}
        for backend in ("numpy", "numba"):
            fn = getattr(_kernels.KERNELS[backend], name)
            times[backend] = _time(fn, kargs, args.repeat)
            outs[backend] = fn(*kargs)
        diff = max(_max_rel(a, b) for a, b in zip(outs["numba"], outs["numpy"]))
        print(f"{name:<10} {1e3 * times['numpy']:>11.4f} {1e3 * times['numba']:>11.4f} "
              f"{times['numpy'] / times['numba']:>8.1f}x {diff:>13.2e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
