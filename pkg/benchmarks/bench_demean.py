"""Timing comparison of the two alternating-demeaning kernels.

The hot loop behind every fixed-effects fit sweeps factor means out of
a column block until convergence.  One implementation is compiled with
numba, the other is pure numpy (``np.bincount`` per factor); normal
runs pick between them through the SHIFTSHARE_NUMBA environment flag.
This script times both on the same problem and checks that they agree
to near machine precision.

Run:  python benchmarks/bench_demean.py [--rows N] [--cols K] [--repeat R]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

import shiftshare._accel as accel
from shiftshare.hdfe import absorb


def _problem(n_rows: int, n_cols: int, seed: int):
    rng = np.random.default_rng(seed)
    # three overlapping factors at panel-like cardinalities
    factors = [
        rng.integers(0, max(n_rows // 20, 2), size=n_rows),
        rng.integers(0, max(n_rows // 200, 2), size=n_rows),
        rng.integers(0, 40, size=n_rows),
    ]
    block = rng.normal(size=(n_rows, n_cols))
    for f in factors:
        block += rng.normal(size=int(f.max()) + 1)[f][:, None]
    return block, factors


def _time(block, factors, repeat: int) -> tuple[float, np.ndarray]:
    best = np.inf
    values = None
    for _ in range(repeat):
        start = time.perf_counter()
        result = absorb(block, factors)
        best = min(best, time.perf_counter() - start)
        values = result.values
    return best, values


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--rows", type=int, default=200_000)
    parser.add_argument("--cols", type=int, default=8)
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    block, factors = _problem(args.rows, args.cols, args.seed)
    print(f"rows={args.rows} cols={args.cols} factors={len(factors)} repeat={args.repeat}")

    accel.USE_NUMBA = False
    t_np, v_np = _time(block, factors, args.repeat)
    print(f"numpy : {t_np * 1e3:9.2f} ms")

    if not accel.HAS_NUMBA:
        print("numba : unavailable; nothing to compare")
        return 0

    accel.USE_NUMBA = True
    _time(block, factors, 1)  # compile outside the timed region
    t_nb, v_nb = _time(block, factors, args.repeat)
    print(f"numba : {t_nb * 1e3:9.2f} ms   (speedup x{t_np / t_nb:.2f})")

    gap = float(np.max(np.abs(v_np - v_nb)))
    print(f"max |difference| between kernels: {gap:.3e}")
    return 0 if gap < 1e-8 else 1


if __name__ == "__main__":
    raise SystemExit(main())
