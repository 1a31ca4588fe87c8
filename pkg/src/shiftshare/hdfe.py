"""High-dimensional fixed effects by alternating within-group demeaning."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._accel import run_sweeps

__all__ = ["ConvergenceError", "Absorption", "absorb", "encode_factors", "drop_singletons", "absorbed_dof"]

DEFAULT_TOL = 1e-10
DEFAULT_MAX_SWEEPS = 10_000


class ConvergenceError(RuntimeError):
    """Alternating projections did not converge within the sweep cap."""

    def __init__(self, sweeps: int, tol: float):
        self.sweeps = sweeps
        self.tol = tol
        super().__init__(f"demeaning failed to reach {tol:g} within {sweeps} sweeps")


def encode_factors(factors) -> tuple[np.ndarray, list[np.ndarray]]:
    """Map raw factor label arrays to dense codes.

    Returns ``(codes, level_keys)`` where ``codes`` is (n, F) int64 and
    ``level_keys[f]`` holds the sorted distinct labels of factor ``f``.
    """
    if not factors:
        raise ValueError("at least one factor required")
    columns, keys = [], []
    n = None
    for raw in factors:
        raw = np.asarray(raw)
        if n is None:
            n = raw.shape[0]
        elif raw.shape[0] != n:
            raise ValueError("factor arrays must share length")
        levels, codes = np.unique(raw, return_inverse=True)
        keys.append(levels)
        columns.append(codes.astype(np.int64))
    return np.column_stack(columns), keys


@dataclass(frozen=True)
class Absorption:
    """Result of absorbing fixed effects out of a column block.

    ``values`` is the demeaned block; ``level_values[f][l, j]`` the
    effect of level ``l`` of factor ``f`` on column ``j``, satisfying
    ``original = values + sum_f level_values[f][codes[:, f]]`` exactly.
    """

    values: np.ndarray
    sweeps: int
    codes: np.ndarray
    level_keys: list[np.ndarray]
    level_values: list[np.ndarray]

    def rebuilt_effects(self) -> np.ndarray:
        """(n, k) sum of the absorbed effects per observation."""
        out = np.zeros_like(self.values)
        for f, values in enumerate(self.level_values):
            out += values[self.codes[:, f]]
        return out


def absorb(
    block: np.ndarray,
    factors,
    weights: np.ndarray | None = None,
    tol: float = DEFAULT_TOL,
    max_sweeps: int = DEFAULT_MAX_SWEEPS,
) -> Absorption:
    """Demean ``block`` (n or n-by-k) within every factor simultaneously.

    Sweeps alternate over factors subtracting (weighted) group means
    until the largest subtracted mean falls below ``tol``; raises
    :class:`ConvergenceError` at ``max_sweeps``.
    """
    block = np.asarray(block, dtype=float)
    squeeze = block.ndim == 1
    x = block.reshape(-1, 1).copy() if squeeze else block.copy()
    n = x.shape[0]
    codes, level_keys = encode_factors(factors)
    if codes.shape[0] != n:
        raise ValueError("factor length differs from block length")
    if weights is None:
        w = np.ones(n)
    else:
        w = np.asarray(weights, dtype=float)
        if w.shape != (n,) or np.any(w < 0):
            raise ValueError("weights must be nonnegative with one entry per row")
    sizes = [k.size for k in level_keys]
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    counts = np.zeros(offsets[-1])
    for f in range(codes.shape[1]):
        counts[offsets[f] : offsets[f + 1]] = np.bincount(codes[:, f], weights=w, minlength=sizes[f])
    level_acc = np.zeros((offsets[-1], x.shape[1]))
    sweeps = run_sweeps(x, codes, offsets, counts, w, level_acc, tol, max_sweeps)
    if sweeps < 0:
        raise ConvergenceError(-sweeps, tol)
    level_values = [level_acc[offsets[f] : offsets[f + 1]] for f in range(codes.shape[1])]
    if squeeze:
        x = x[:, 0]
        level_values = [v[:, 0] for v in level_values]
    return Absorption(values=x, sweeps=sweeps, codes=codes, level_keys=level_keys, level_values=level_values)


def drop_singletons(factors) -> np.ndarray:
    """Boolean keep-mask after iteratively removing single-observation
    fixed-effect groups (dropping a row can create new singletons)."""
    codes, _ = encode_factors(factors)
    keep = np.ones(codes.shape[0], dtype=bool)
    changed = True
    while changed:
        changed = False
        for f in range(codes.shape[1]):
            counts = np.bincount(codes[keep, f], minlength=int(codes[:, f].max()) + 1)
            single = counts[codes[:, f]] == 1
            hit = keep & single
            if hit.any():
                keep &= ~hit
                changed = True
    return keep


def absorbed_dof(factors) -> int:
    """Model degrees of freedom charged for the absorbed effects:
    full levels for the first factor, levels minus one for the rest."""
    _, keys = encode_factors(factors)
    return sum(k.size for k in keys) - (len(keys) - 1)
