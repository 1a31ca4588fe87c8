"""Fixed-effects OLS and 2SLS with weak-instrument diagnostics.

Estimators take plain column blocks plus factor arrays; panel semantics
(which cell maps to which row) stay with the caller.  Singleton
fixed-effect groups are dropped before estimation, all blocks are
within-transformed jointly, and the 2SLS bread uses first-stage fitted
values while residuals use the actual endogenous columns.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .cluster import VceResult, classical_vce, cluster_vce, hc1_vce
from .errors import CollinearityError, UnderIdentifiedError
from .hdfe import absorb, absorbed_dof, drop_singletons

__all__ = [
    "IvEstimates",
    "EffectiveF",
    "fit_fe_ols",
    "fit_2sls",
    "effective_f",
    "sanderson_windmeijer",
    "expand_interactions",
    "EFFECTIVE_F_TAUS",
]

EFFECTIVE_F_TAUS = (0.05, 0.10, 0.20, 0.30)


@dataclass(frozen=True)
class EffectiveF:
    """Effective first-stage F with worst-case-bias critical values.

    The statistic scales the nonrobust F by the robust covariance of
    the orthonormalized-instrument coefficients; critical values come
    from a two-moment noncentral chi-squared approximation indexed by
    the tolerated Nagar bias tau.
    """

    statistic: float
    critical_values: Mapping[float, float]
    effective_dof: Mapping[float, float]
    w_trace: float
    n_instruments: int

    def passes(self, tau: float = 0.10) -> bool:
        return self.statistic > self.critical_values[tau]


@dataclass(frozen=True)
class SWStats:
    """Per-endogenous Sanderson-Windmeijer statistics."""

    weak_f: Mapping[str, float]
    underid_stat: Mapping[str, float]
    underid_pvalue: Mapping[str, float]
    dof: int


@dataclass(frozen=True)
class IvEstimates:
    params: Mapping[str, float]
    vce: VceResult
    nobs: int
    n_singletons_dropped: int
    keep_mask: np.ndarray
    fitted: np.ndarray  # structural fitted values on kept rows, raw scale
    resid: np.ndarray
    endog_names: tuple[str, ...]
    exog_names: tuple[str, ...]
    instrument_names: tuple[str, ...]
    first_stage_coef: Mapping[str, Mapping[str, float]]
    first_stage_fitted: Mapping[str, np.ndarray]
    r2_within: float
    diagnostics: Mapping[str, object] = field(default_factory=dict)

    @property
    def se(self) -> dict[str, float]:
        s = self.vce.se
        return {k: float(s[j]) for j, k in enumerate(self.params)}

    def tstat(self, name: str) -> float:
        return self.params[name] / self.se[name]

    def conf_int(self, name: str, level: float = 0.95) -> tuple[float, float]:
        crit = stats.t.ppf(0.5 + level / 2.0, self.vce.df_t)
        b, s = self.params[name], self.se[name]
        return b - crit * s, b + crit * s


def _named(block, names, label, n_rows=None) -> tuple[np.ndarray, tuple[str, ...]]:
    if block is None:
        return np.empty((n_rows or 0, 0)), ()
    block = np.asarray(block, dtype=float)
    if block.ndim == 1:
        block = block[:, None]
    if names is None:
        names = tuple(f"{label}{j}" for j in range(block.shape[1]))
    if len(names) != block.shape[1]:
        raise ValueError(f"{label} names do not match column count")
    return block, tuple(names)


def _check_full_rank(block: np.ndarray, names: Sequence[str]):
    if block.shape[1] == 0:
        return
    r = np.linalg.qr(block, mode="r")
    scale = np.sqrt((block**2).sum(axis=0))
    for j, name in enumerate(names):
        if abs(r[j, j]) < 1e-10 * max(scale[j], 1.0):
            raise CollinearityError(name)


def _partial_out(target: np.ndarray, controls: np.ndarray) -> np.ndarray:
    if controls.shape[1] == 0:
        return target
    coef, *_ = np.linalg.lstsq(controls, target, rcond=None)
    return target - controls @ coef


def _prepare(y, X_list, fe, cluster):
    """Singleton-drop, subset everything, and within-transform jointly."""
    y = np.asarray(y, dtype=float)
    n = y.shape[0]
    fe = [np.asarray(f) for f in (fe or [])]
    cluster = [np.asarray(c) for c in (cluster or [])]
    for f in fe + cluster:
        if f.shape[0] != n:
            raise ValueError("factor length differs from data length")
    if fe:
        keep = drop_singletons(fe)
    else:
        keep = np.ones(n, dtype=bool)
    blocks = [b[keep] for b in X_list]
    y = y[keep]
    fe_kept = [f[keep] for f in fe]
    cluster_kept = [c[keep] for c in cluster]
    if fe_kept:
        stacked = np.column_stack([y[:, None]] + [b for b in blocks if b.shape[1]])
        res = absorb(stacked, fe_kept)
        out, pos = [], 1
        y_w = res.values[:, 0]
        for b in blocks:
            if b.shape[1]:
                out.append(res.values[:, pos : pos + b.shape[1]])
                pos += b.shape[1]
            else:
                out.append(b)
        dof_fe = absorbed_dof(fe_kept)
    else:
        # no effects to sweep out; the caller appends an intercept column
        y_w, out, dof_fe = y, blocks, 0
    return y, y_w, out, fe_kept, cluster_kept, keep, dof_fe


def _vce_for(design, resid, cluster_dims, n_params) -> VceResult:
    if cluster_dims:
        return cluster_vce(design, resid, cluster_dims, n_params)
    return hc1_vce(design, resid, n_params)


def fit_fe_ols(
    y,
    X,
    names: Sequence[str] | None = None,
    fe=None,
    cluster=None,
) -> IvEstimates:
    """Within-transformed OLS; matches the dummy-variable regression."""
    X, names = _named(X, names, "x")
    if not fe:
        X = np.column_stack([X, np.ones(X.shape[0])])
        names = names + ("const",)
    y_raw, y_w, (X_w,), fe_kept, cl, keep, dof_fe = _prepare(y, [X], fe, cluster)
    _check_full_rank(X_w, names)
    theta = np.linalg.solve(X_w.T @ X_w, X_w.T @ y_w)
    resid = y_w - X_w @ theta
    n_params = len(names) + dof_fe
    vce = _vce_for(X_w, resid, cl, n_params)
    ssw = float((y_w - y_w.mean()) @ (y_w - y_w.mean()))
    return IvEstimates(
        params={k: float(v) for k, v in zip(names, theta)},
        vce=vce,
        nobs=int(keep.sum()),
        n_singletons_dropped=int((~keep).sum()),
        keep_mask=keep,
        fitted=y_raw - resid,
        resid=resid,
        endog_names=(),
        exog_names=names,
        instrument_names=(),
        first_stage_coef={},
        first_stage_fitted={},
        r2_within=1.0 - float(resid @ resid) / ssw if ssw > 0 else np.nan,
    )


def fit_2sls(
    y,
    endog,
    instruments,
    exog=None,
    endog_names: Sequence[str] | None = None,
    instrument_names: Sequence[str] | None = None,
    exog_names: Sequence[str] | None = None,
    fe=None,
    cluster=None,
    diagnostics: bool = True,
) -> IvEstimates:
    """Two-stage least squares under absorbed fixed effects.

    Handles any number of endogenous regressors; requires at least as
    many instruments and full rank of the instrument-endogenous cross
    moment after partialling controls.  Weak-identification diagnostics
    attach automatically: the effective F for one endogenous regressor,
    Sanderson-Windmeijer statistics for several.
    """
    Xe, endog_names = _named(endog, endog_names, "endog")
    Zb, instrument_names = _named(instruments, instrument_names, "z")
    Xx, exog_names = _named(exog, exog_names, "w", n_rows=Xe.shape[0])
    if Zb.shape[1] < Xe.shape[1]:
        raise UnderIdentifiedError(
            f"{Zb.shape[1]} instruments cannot identify {Xe.shape[1]} endogenous regressors"
        )
    if not fe:
        Xx = np.column_stack([Xx, np.ones(Xe.shape[0])])
        exog_names = exog_names + ("const",)
    y_raw, y_w, (Xe_w, Zb_w, Xx_w), fe_kept, cl, keep, dof_fe = _prepare(y, [Xe, Zb, Xx], fe, cluster)
    n, p = Xe_w.shape
    q = Zb_w.shape[1]

    Z_perp = _partial_out(Zb_w, Xx_w)
    Xe_perp = _partial_out(Xe_w, Xx_w)
    sv = np.linalg.svd(Z_perp.T @ Xe_perp, compute_uv=False)
    if sv.size < p or (sv.size and sv[min(p, sv.size) - 1] <= 1e-10 * max(sv[0], 1.0)):
        raise UnderIdentifiedError("instrument-endogenous cross moment is rank deficient")

    W = np.column_stack([Zb_w, Xx_w])
    fs_coef, *_ = np.linalg.lstsq(W, Xe_w, rcond=None)
    Xe_hat = W @ fs_coef

    Q = np.column_stack([Xe_hat, Xx_w])
    _check_full_rank(Q, endog_names + exog_names)
    theta = np.linalg.solve(Q.T @ Q, Q.T @ y_w)
    resid = y_w - np.column_stack([Xe_w, Xx_w]) @ theta
    n_params = p + Xx_w.shape[1] + dof_fe
    vce = _vce_for(Q, resid, cl, n_params)

    fs_names = instrument_names + exog_names
    first_stage_coef = {}
    first_stage_fitted = {}
    Xe_raw = Xe[keep]
    fs_resid = Xe_w - Xe_hat
    for j, name in enumerate(endog_names):
        first_stage_coef[name] = {k: float(v) for k, v in zip(fs_names, fs_coef[:, j])}
        first_stage_fitted[name] = Xe_raw[:, j] - fs_resid[:, j]

    diag: dict[str, object] = {}
    if diagnostics:
        if p == 1:
            diag["effective_f"] = effective_f(
                Xe_w[:, 0], Zb_w, Xx_w, cluster=cl, dof_absorbed=dof_fe, prepared=True
            )
        else:
            diag["sanderson_windmeijer"] = sanderson_windmeijer(
                Xe_w, Zb_w, Xx_w,
                endog_names=endog_names,
                cluster=cl,
                dof_absorbed=dof_fe,
                prepared=True,
            )

    ssw = float((y_w - y_w.mean()) @ (y_w - y_w.mean()))
    return IvEstimates(
        params={k: float(v) for k, v in zip(endog_names + exog_names, theta)},
        vce=vce,
        nobs=n,
        n_singletons_dropped=int((~keep).sum()),
        keep_mask=keep,
        fitted=y_raw - resid,
        resid=resid,
        endog_names=endog_names,
        exog_names=exog_names,
        instrument_names=instrument_names,
        first_stage_coef=first_stage_coef,
        first_stage_fitted=first_stage_fitted,
        r2_within=1.0 - float(resid @ resid) / ssw if ssw > 0 else np.nan,
        diagnostics=diag,
    )


def _inv_sqrt_psd(M: np.ndarray) -> np.ndarray:
    eigval, eigvec = np.linalg.eigh((M + M.T) / 2.0)
    tol = eigval.max() * 1e-12 if eigval.size else 0.0
    if eigval.min() <= tol:
        raise ValueError("instrument block is rank deficient after partialling controls")
    return (eigvec / np.sqrt(eigval)) @ eigvec.T


def effective_f(
    endog,
    instruments,
    exog=None,
    fe=None,
    cluster=None,
    vce: str = "robust",
    dof_absorbed: int = 0,
    taus: Sequence[float] = EFFECTIVE_F_TAUS,
    alpha: float = 0.05,
    prepared: bool = False,
) -> EffectiveF:
    """Effective first-stage F statistic with tau-indexed critical values.

    With instruments orthonormalized, the statistic divides the scaled
    first-stage coefficient norm by the trace of the coefficients'
    sandwich covariance; under one instrument and ``vce='classical'``
    it reduces to the conventional F.  Critical values solve a
    noncentral chi-squared quantile at effective degrees of freedom
    matched to the first two moments of the worst-case null.
    """
    x = np.asarray(endog, dtype=float).reshape(-1)
    if prepared:
        Z_w, X_w, x_w = np.asarray(instruments, float), np.asarray(exog, float), x
        cl = list(cluster or [])
    else:
        Zb, _ = _named(instruments, None, "z")
        Xx, _ = _named(exog, None, "w", n_rows=x.shape[0])
        if not fe:
            Xx = np.column_stack([Xx, np.ones(x.shape[0])])
        _, x_w, (Z_w, X_w), _, cl, keep, dof_absorbed = _prepare(x, [Zb, Xx], fe, cluster)
    n = x_w.shape[0]
    q = Z_w.shape[1]

    Zp = _partial_out(Z_w, X_w)
    xp = _partial_out(x_w, X_w)
    var = (Zp**2).sum(axis=0)
    if np.any(var <= 1e-12 * n):
        raise ValueError("an instrument has no variance after partialling controls")
    Zn = Zp @ _inv_sqrt_psd(Zp.T @ Zp / n)

    pi = Zn.T @ xp / n
    u = xp - Zn @ pi
    dof_model = q + X_w.shape[1] + dof_absorbed
    if vce == "classical":
        s2 = float(u @ u) / (n - dof_model)
        W = s2 * np.eye(q)
    elif cl:
        # Zn'Zn = n I, so the sandwich vcov of pi-hat is meat / n^2 and
        # W = n Cov(pi-hat) falls out of the shared cluster machinery.
        W = n * cluster_vce(Zn, u, cl, dof_model).vcov
    else:
        W = n * hc1_vce(Zn, u, dof_model).vcov
    trW = float(np.trace(W))
    if trW <= 0:
        raise ValueError("degenerate first-stage covariance")
    stat = float(n * (pi @ pi) / trW)
    eigmax = float(np.linalg.eigvalsh((W + W.T) / 2.0).max())
    trW2 = float(np.trace(W.T @ W))
    crits, keffs = {}, {}
    for tau in taus:
        keff = trW**2 * (1.0 + 2.0 / tau) / (trW2 + 2.0 * trW * eigmax / tau)
        crits[tau] = float(stats.ncx2.ppf(1.0 - alpha, df=keff, nc=keff / tau) / keff)
        keffs[tau] = float(keff)
    return EffectiveF(
        statistic=stat,
        critical_values=crits,
        effective_dof=keffs,
        w_trace=trW,
        n_instruments=q,
    )


def sanderson_windmeijer(
    endog,
    instruments,
    exog=None,
    endog_names: Sequence[str] | None = None,
    fe=None,
    cluster=None,
    dof_absorbed: int = 0,
    prepared: bool = False,
) -> SWStats:
    """Conditional first-stage statistics with several endogenous
    regressors: each one is purged of the others' instrumented part and
    the purged column's instrument F is rescaled by q - p + 1.

    An endogenous column identical to another yields a zero statistic
    (nothing left to identify) rather than an error.
    """
    Xe, endog_names = _named(endog, endog_names, "endog")
    if prepared:
        Xe_w = Xe
        Z_w = np.asarray(instruments, float)
        X_w = np.asarray(exog, float)
        cl = list(cluster or [])
    else:
        Zb, _ = _named(instruments, None, "z")
        Xx, _ = _named(exog, None, "w", n_rows=Xe.shape[0])
        if not fe:
            Xx = np.column_stack([Xx, np.ones(Xe.shape[0])])
        dummy_y = Xe[:, 0]
        _, _, (Xe_w, Z_w, X_w), _, cl, keep, dof_absorbed = _prepare(dummy_y, [Xe, Zb, Xx], fe, cluster)
    n, p = Xe_w.shape
    q = Z_w.shape[1]
    if q < p:
        raise UnderIdentifiedError(f"{q} instruments cannot identify {p} endogenous regressors")

    Zp = _partial_out(Z_w, X_w)
    Xp = _partial_out(Xe_w, X_w)
    fitted_all, *_ = np.linalg.lstsq(Zp, Xp, rcond=None)
    X_hat = Zp @ fitted_all
    dof_num = q - p + 1
    dof_den = n - q - X_w.shape[1] - dof_absorbed
    weak_f, underid, pvals = {}, {}, {}
    for j, name in enumerate(endog_names):
        others = np.delete(np.arange(p), j)
        xj = Xp[:, j]
        if others.size:
            Xo_hat = X_hat[:, others]
            coef, *_ = np.linalg.lstsq(Xo_hat, xj, rcond=None)
            v = xj - Xp[:, others] @ coef
        else:
            v = xj
        if float(v @ v) <= 1e-12 * max(float(xj @ xj), 1.0):
            weak_f[name] = 0.0
            underid[name] = 0.0
            pvals[name] = 1.0
            continue
        pi, *_ = np.linalg.lstsq(Zp, v, rcond=None)
        v_fit = Zp @ pi
        u = v - v_fit
        if cl:
            design = Zp
            vv = cluster_vce(design, u, cl, q + X_w.shape[1] + dof_absorbed)
            wald = float(pi @ np.linalg.solve(vv.vcov, pi))
        else:
            s2 = float(u @ u) / dof_den
            wald = float(v_fit @ v_fit) / s2
        weak_f[name] = wald / dof_num
        underid[name] = wald
        pvals[name] = float(stats.chi2.sf(wald, dof_num))
    return SWStats(weak_f=weak_f, underid_stat=underid, underid_pvalue=pvals, dof=dof_num)


def expand_interactions(left, right):
    """Interaction-expand two named column sets: all left columns, all
    right columns, then every pairwise product left-major, dropping
    exact duplicate columns."""
    out: list[tuple[str, np.ndarray]] = []

    def push(name, col):
        col = np.asarray(col, dtype=float)
        for _, kept in out:
            if col.shape == kept.shape and np.array_equal(col, kept):
                return
        out.append((name, col))

    for name, col in left:
        push(name, col)
    for name, col in right:
        push(name, col)
    for lname, lcol in left:
        for rname, rcol in right:
            push(f"{lname}:{rname}", np.asarray(lcol, float) * np.asarray(rcol, float))
    return out
