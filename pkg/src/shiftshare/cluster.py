"""Sandwich variance estimators with multiway clustering.

Multiway covariance follows the inclusion-exclusion rule: over every
nonempty subset of the clustering dimensions, add (odd subsets) or
subtract (even subsets) the one-way clustered sandwich computed on the
intersection clusters.  Each one-way piece carries the small-sample
factor G/(G-1) * (N-1)/(N-K).  The combined matrix can lose positive
semidefiniteness; negative eigenvalues are floored at zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .errors import DegenerateClusterError

__all__ = ["VceResult", "cluster_vce", "hc1_vce", "classical_vce", "combine_ids"]


@dataclass(frozen=True)
class VceResult:
    vcov: np.ndarray
    kind: str
    df_t: int
    n_clusters: tuple[int, ...] = ()
    eigenvalue_floored: bool = False

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.vcov))


def combine_ids(id_arrays) -> np.ndarray:
    """Dense codes for the intersection of several id arrays."""
    if len(id_arrays) == 1:
        _, codes = np.unique(np.asarray(id_arrays[0]), return_inverse=True)
        return codes
    combined = None
    for ids in id_arrays:
        _, codes = np.unique(np.asarray(ids), return_inverse=True)
        if combined is None:
            combined = codes.astype(np.int64)
        else:
            combined = combined * (codes.max() + 1) + codes
    _, codes = np.unique(combined, return_inverse=True)
    return codes


def _oneway_meat(scores: np.ndarray, codes: np.ndarray) -> tuple[np.ndarray, int]:
    n_clusters = int(codes.max()) + 1
    sums = np.zeros((n_clusters, scores.shape[1]))
    np.add.at(sums, codes, scores)
    return sums.T @ sums, n_clusters


def cluster_vce(design: np.ndarray, resid: np.ndarray, dims, n_params: int) -> VceResult:
    """Multiway cluster-robust covariance of OLS-form coefficients.

    ``design`` is the bread regressor block (n, k), ``resid`` the
    residual vector, ``dims`` a list of cluster id arrays (one per
    clustering dimension), ``n_params`` the model dof charged in the
    correction (slopes plus absorbed fixed effects).
    """
    design = np.asarray(design, dtype=float)
    resid = np.asarray(resid, dtype=float)
    n = design.shape[0]
    if not dims:
        raise ValueError("no clustering dimensions; use hc1_vce or classical_vce")
    dim_codes = []
    for d, ids in enumerate(dims):
        codes = combine_ids([ids]) if not isinstance(ids, (list, tuple)) else combine_ids(list(ids))
        if codes.max() == 0:
            raise DegenerateClusterError(f"clustering dimension {d} has a single cluster")
        dim_codes.append(codes)
    bread = np.linalg.inv(design.T @ design)
    scores = design * resid[:, None]
    meat = np.zeros((design.shape[1], design.shape[1]))
    counts = []
    for size in range(1, len(dim_codes) + 1):
        sign = 1.0 if size % 2 == 1 else -1.0
        for subset in combinations(range(len(dim_codes)), size):
            inter = combine_ids([dim_codes[d] for d in subset])
            piece, g = _oneway_meat(scores, inter)
            if size == 1:
                counts.append(g)
            if g < 2:
                raise DegenerateClusterError("intersection clustering collapsed to a single cluster")
            correction = (g / (g - 1.0)) * ((n - 1.0) / (n - n_params))
            meat += sign * correction * piece
    vcov = bread @ meat @ bread
    floored = False
    eigval, eigvec = np.linalg.eigh((vcov + vcov.T) / 2.0)
    if eigval.min() < 0:
        floored = True
        vcov = (eigvec * np.clip(eigval, 0.0, None)) @ eigvec.T
    return VceResult(
        vcov=vcov,
        kind="cluster",
        df_t=min(counts) - 1,
        n_clusters=tuple(counts),
        eigenvalue_floored=floored,
    )


def hc1_vce(design: np.ndarray, resid: np.ndarray, n_params: int) -> VceResult:
    design = np.asarray(design, dtype=float)
    resid = np.asarray(resid, dtype=float)
    n = design.shape[0]
    bread = np.linalg.inv(design.T @ design)
    scores = design * resid[:, None]
    vcov = bread @ (scores.T @ scores) @ bread * (n / (n - n_params))
    return VceResult(vcov=vcov, kind="hc1", df_t=n - n_params)


def classical_vce(design: np.ndarray, resid: np.ndarray, n_params: int) -> VceResult:
    design = np.asarray(design, dtype=float)
    resid = np.asarray(resid, dtype=float)
    n = design.shape[0]
    s2 = float(resid @ resid) / (n - n_params)
    vcov = s2 * np.linalg.inv(design.T @ design)
    return VceResult(vcov=vcov, kind="classical", df_t=n - n_params)
