"""Compare the numba and numpy implementations of the columnar CEP kernels.

Usage: python benchmarks/bench_kernels.py [--n 20000] [--repeats 5]

Both backends run on the same inputs; outputs are checked for equality before
timings are reported. The numba timings exclude the first (compiling) call.
"""
from __future__ import annotations

import argparse
import json
import time

import numpy as np

from kcep import kernels as K


def inputs(n: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    ts = np.cumsum(rng.integers(0, 200, size=n)).astype(np.int64)
    codes = rng.integers(0, 20, size=n).astype(np.int64)
    first_ok = rng.random(n) < 0.5
    second_ok = rng.random(n) < 0.5
    vals = np.round(rng.uniform(200, 800, size=n) * 2) / 2
    return ts, codes, first_ok, second_ok, vals


def best_of(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=20000)
    ap.add_argument("--width", type=int, default=5000, help="window width in ms")
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args(argv)
    if not K.HAVE_NUMBA:
        print(json.dumps({"error": "numba unavailable or disabled; nothing to compare"}))
        return 1
    ts, codes, first_ok, second_ok, vals = inputs(args.n)
    cases = {
        "seq_pairs": (K.seq_pairs_numpy, K.seq_pairs_numba, (ts, codes, first_ok, second_ok, 0, args.width)),
        "sliding_aggregates": (K.sliding_aggregates_numpy, K.sliding_aggregates_numba, (ts, vals, 0, args.width)),
    }
    report = {"n": args.n, "width_ms": args.width, "kernels": {}}
    for name, (np_fn, nb_fn, a) in cases.items():
        ref = np_fn(*a)
        got = nb_fn(*a)  # first call compiles
        same = all(np.array_equal(x, y) for x, y in zip(ref, got))
        t_np = best_of(lambda: np_fn(*a), args.repeats)
        t_nb = best_of(lambda: nb_fn(*a), args.repeats)
        report["kernels"][name] = {"equal_outputs": same, "numpy_s": t_np, "numba_s": t_nb,
                                   "speedup": t_np / t_nb if t_nb > 0 else None}
    print(json.dumps(report, indent=2))
    return 0 if all(k["equal_outputs"] for k in report["kernels"].values()) else 1


if __name__ == "__main__":
    raise SystemExit(main())
