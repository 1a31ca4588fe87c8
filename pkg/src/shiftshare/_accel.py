"""Hot numeric kernels, JIT-compiled when numba is available.

The alternating within-group demeaning sweep is the only loop in the
package that numpy cannot express without materializing per-sweep
temporaries, so it gets a compiled kernel.  A pure-numpy twin with the
same signature is kept alongside it; set ``SHIFTSHARE_NUMBA=0`` to force
the numpy path (useful for debugging and for the benchmark under
``benchmarks/``).
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(func):
            return func

        return wrap


def _flag_enabled(value: str | None) -> bool:
    if value is None:
        return True
    return value.strip().lower() not in {"0", "false", "off", "no"}


USE_NUMBA = HAS_NUMBA and _flag_enabled(os.environ.get("SHIFTSHARE_NUMBA"))


@njit(cache=True)
def _sweep_kernel_njit(x, codes, offsets, counts, weights, level_acc, tol, max_sweeps):
    n, k = x.shape
    n_factors = codes.shape[1]
    total_levels = level_acc.shape[0]
    means = np.zeros((total_levels, k))
    for sweep in range(max_sweeps):
        max_adj = 0.0
        for f in range(n_factors):
            base = offsets[f]
            top = offsets[f + 1]
            for lev in range(base, top):
                for j in range(k):
                    means[lev, j] = 0.0
            for i in range(n):
                lev = base + codes[i, f]
                w = weights[i]
                for j in range(k):
                    means[lev, j] += w * x[i, j]
            for lev in range(base, top):
                cw = counts[lev]
                if cw > 0.0:
                    for j in range(k):
                        m = means[lev, j] / cw
                        means[lev, j] = m
                        if abs(m) > max_adj:
                            max_adj = abs(m)
            for i in range(n):
                lev = base + codes[i, f]
                for j in range(k):
                    x[i, j] -= means[lev, j]
            for lev in range(base, top):
                for j in range(k):
                    level_acc[lev, j] += means[lev, j]
        if max_adj < tol:
            return sweep + 1
    return -max_sweeps


def _sweep_kernel_numpy(x, codes, offsets, counts, weights, level_acc, tol, max_sweeps):
    n, k = x.shape
    n_factors = codes.shape[1]
    for sweep in range(max_sweeps):
        max_adj = 0.0
        for f in range(n_factors):
            base = offsets[f]
            top = offsets[f + 1]
            n_levels = top - base
            cols = codes[:, f]
            means = np.empty((n_levels, k))
            for j in range(k):
                means[:, j] = np.bincount(cols, weights=weights * x[:, j], minlength=n_levels)
            cw = counts[base:top]
            nz = cw > 0.0
            means[nz] /= cw[nz, None]
            means[~nz] = 0.0
            x -= means[cols]
            level_acc[base:top] += means
            if means.size:
                max_adj = max(max_adj, float(np.abs(means).max()))
        if max_adj < tol:
            return sweep + 1
    return -max_sweeps


def run_sweeps(x, codes, offsets, counts, weights, level_acc, tol, max_sweeps):
    """Alternate group-mean subtraction over factors until means vanish.

    Parameters
    ----------
    x : (n, k) float64, modified in place.
    codes : (n, F) int64 level codes, contiguous from 0 per factor.
    offsets : (F+1,) int64 start index of each factor in the flat level axis.
    counts : (total_levels,) float64 weighted observation count per level.
    weights : (n,) float64 observation weights.
    level_acc : (total_levels, k) float64, accumulates the subtracted means
        in place (the recovered group effects once converged).
    tol : convergence threshold on the largest subtracted mean.
    max_sweeps : sweep cap.

    Returns
    -------
    int : number of sweeps used; negative (``-max_sweeps``) on failure
    to converge.
    """
    kernel = _sweep_kernel_njit if USE_NUMBA else _sweep_kernel_numpy
    return kernel(x, codes, offsets, counts, weights, level_acc, tol, max_sweeps)
