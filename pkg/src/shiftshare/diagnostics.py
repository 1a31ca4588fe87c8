"""Instrument-validity diagnostics for Bartik designs.

Per-origin decompositions, share balance, the origin-level (shift
perspective) reformulation, concentration measures, distance-ring
spillover columns, and a same-state permutation placebo.  Everything
operates on (zone, year) grids plus a residualizing control set so the
numbers tie out exactly with the destination-level 2SLS fits.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .errors import EstimationError
from .geo import GeoRegistry
from .hdfe import absorb, absorbed_dof
from .seeding import derive_rng

__all__ = [
    "Residualizer",
    "RotembergReport",
    "rotemberg_decompose",
    "share_balance",
    "OriginLevelResult",
    "origin_level_transform",
    "HerfindahlReport",
    "herfindahl_diagnostics",
    "ring_columns",
    "distance_ring_design",
    "PlaceboResult",
    "permutation_placebo",
]


class Residualizer:
    """Projects (zone, year) grids off fixed effects and control columns.

    Factors and controls are fixed at construction so every grid passed
    through ``residualize`` sees the identical annihilator; that is what
    makes the decomposition identities exact.  An optional row mask
    restricts the sample: excluded rows come back as exact zeros, so
    they drop out of every inner product downstream.
    """

    def __init__(
        self,
        factors: Sequence[np.ndarray],
        controls: np.ndarray | None = None,
        mask: np.ndarray | None = None,
    ):
        self.factors = [np.asarray(f) for f in factors]
        self.mask = None if mask is None else np.asarray(mask, dtype=bool)
        self._weights = None if self.mask is None else self.mask.astype(float)
        if controls is not None:
            controls = np.asarray(controls, dtype=float)
            if controls.ndim == 1:
                controls = controls[:, None]
        if controls is not None and controls.size:
            self._controls = self._sweep(controls)
        else:
            self._controls = None
        dof_factors = self.factors if self.mask is None else [f[self.mask] for f in self.factors]
        self.dof = absorbed_dof(dof_factors) if self.factors else 0
        if self._controls is not None:
            self.dof += self._controls.shape[1]

    def _sweep(self, cols: np.ndarray) -> np.ndarray:
        if self.factors:
            cols = absorb(cols, self.factors, weights=self._weights).values
        if self.mask is not None:
            cols = cols * self._weights[:, None]
        return cols

    def residualize(self, cols: np.ndarray) -> np.ndarray:
        cols = np.asarray(cols, dtype=float)
        squeeze = cols.ndim == 1
        if squeeze:
            cols = cols[:, None]
        cols = self._sweep(cols)
        if self._controls is not None:
            coef, *_ = np.linalg.lstsq(self._controls, cols, rcond=None)
            cols = cols - self._controls @ coef
        return cols[:, 0] if squeeze else cols


@dataclass(frozen=True)
class RotembergReport:
    """Per-origin weights and just-identified estimates for one Bartik.

    ``phi_full`` is the single-instrument 2SLS estimate the weighted
    per-origin estimates must reproduce: sum(weight) = 1 and
    sum(weight * phi_origin) = phi_full, both exact up to rounding,
    with zero-covariance origins contributing weight 0 and an undefined
    (NaN) phi_origin.
    """

    origin_ids: np.ndarray
    weight: np.ndarray
    phi_origin: np.ndarray
    first_stage_f: np.ndarray
    share_variance: np.ndarray
    mean_stock: np.ndarray
    phi_defined: np.ndarray
    phi_full: float
    negative_weight_sum: float
    positive_weight_sum: float
    per_period: tuple | None = None  # (origin_ids, weight grid, phi grid) when requested

    @property
    def weight_sum(self) -> float:
        return float(self.weight.sum())

    @property
    def weighted_phi(self) -> float:
        return float(np.sum(np.where(self.phi_defined, self.weight * self.phi_origin, 0.0)))

    def top(self, k: int = 10) -> list[dict]:
        order = np.argsort(self.weight)[::-1][:k]
        return [
            {
                "origin": int(self.origin_ids[i]),
                "weight": float(self.weight[i]),
                "phi": float(self.phi_origin[i]),
                "first_stage_f": float(self.first_stage_f[i]),
                "share_variance": float(self.share_variance[i]),
                "mean_stock": float(self.mean_stock[i]),
            }
            for i in order
        ]


def _origin_components(shares, stocks, geo, variant):
    """Per-origin (zone, year) instrument contributions; they sum to the
    corresponding Bartik variant by construction."""
    shares = np.asarray(shares, dtype=float)
    stocks = np.asarray(stocks, dtype=float)
    n_zones = stocks.shape[0]
    s = shares.copy()
    idx = np.arange(n_zones)
    if variant == "spatial_lag":
        nu = geo.neighbor_index
        comps = s[:, nu, :] * stocks[:, None, :]  # [o, d, t] = s[o, nu(d), t] * I_ot
        comps[idx, idx, :] = 0.0  # excluded origin o = d
        comps[nu, idx, :] = 0.0  # excluded origin o = nu(d)
        return comps
    s[idx, idx, :] = 0.0
    if variant == "interstate":
        same_state = geo.state_codes[:, None] == geo.state_codes[None, :]
        s[same_state] = 0.0
    return s * stocks[:, None, :]  # (origin, dest, year)


def rotemberg_decompose(
    shares,
    stocks,
    geo: GeoRegistry,
    y_grid,
    x_grid,
    residualizer: Residualizer,
    variant: str = "all",
    per_period: bool = False,
) -> RotembergReport:
    """Decompose a single-instrument Bartik 2SLS estimate by origin.

    Weights are the origin components' covariances with the
    residualized endogenous variable, normalized by the full
    instrument's; the per-origin estimates are just-identified IV
    ratios on the same residualized data.
    """
    comps = _origin_components(shares, stocks, geo, variant)  # (o, d, t)
    n_zones, _, n_years = comps.shape
    y = residualizer.residualize(np.asarray(y_grid, dtype=float).reshape(-1))
    x = residualizer.residualize(np.asarray(x_grid, dtype=float).reshape(-1))
    z_cols = residualizer.residualize(comps.reshape(n_zones, -1).T)  # (n, o)
    b = z_cols.sum(axis=1)

    den_full = float(b @ x)
    if den_full == 0.0:
        raise EstimationError("instrument is orthogonal to the endogenous variable after residualization")
    num_o = z_cols.T @ x
    weight = num_o / den_full
    phi_num = z_cols.T @ y
    defined = num_o != 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        phi = np.where(defined, phi_num / num_o, np.nan)

    # just-identified first-stage F per origin, conventional errors
    zz = (z_cols**2).sum(axis=0)
    dof = max(x.shape[0] - residualizer.dof - 1, 1)
    f_stat = np.full(n_zones, np.nan)
    for o in range(n_zones):
        if zz[o] <= 0:
            continue
        pi = num_o[o] / zz[o]
        resid = x - z_cols[:, o] * pi
        s2 = float(resid @ resid) / dof
        f_stat[o] = pi * pi * zz[o] / s2 if s2 > 0 else np.inf

    share_mat = np.asarray(shares, dtype=float)
    offdiag = ~np.eye(n_zones, dtype=bool)
    share_var = np.array([share_mat[o][offdiag[o]].var() for o in range(n_zones)])
    mean_stock = np.asarray(stocks, dtype=float).mean(axis=1)

    per = None
    if per_period:
        # component of (o, t): origin o's contribution confined to year t
        w_ot = np.empty((n_zones, n_years))
        p_num = np.empty((n_zones, n_years))
        for t in range(n_years):
            block = np.zeros((n_zones, n_years, n_zones))
            block[:, t, :] = comps[:, :, t].T
            cols_t = residualizer.residualize(block.reshape(-1, n_zones))
            w_ot[:, t] = cols_t.T @ x / den_full
            p_num[:, t] = cols_t.T @ y
        with np.errstate(divide="ignore", invalid="ignore"):
            p_ot = np.where(w_ot != 0.0, p_num / (w_ot * den_full), np.nan)
        per = (geo.zone_ids.copy(), w_ot, p_ot)

    return RotembergReport(
        origin_ids=geo.zone_ids.copy(),
        weight=weight,
        phi_origin=phi,
        first_stage_f=f_stat,
        share_variance=share_var,
        mean_stock=mean_stock,
        phi_defined=defined,
        phi_full=float((b @ y) / den_full),
        negative_weight_sum=float(weight[weight < 0].sum()),
        positive_weight_sum=float(weight[weight > 0].sum()),
        per_period=per,
    )


def share_balance(
    shares,
    characteristics: Mapping[str, np.ndarray],
    geo: GeoRegistry,
    origins: Sequence[int] | None = None,
    lag: int = 1,
    difference: bool = False,
    weights: np.ndarray | None = None,
) -> list[dict]:
    """Correlations and slopes of predicted shares on lagged destination
    characteristics, one row per (origin, characteristic).

    ``difference=True`` first-differences both sides over years,
    absorbing any fixed destination component.  ``weights`` (a
    (zone, year) grid) switches the slope to weighted least squares.
    Zero-variance characteristics are flagged rather than fit.
    """
    shares = np.asarray(shares, dtype=float)
    n_zones, _, n_years = shares.shape
    if origins is None:
        origin_idx = np.arange(n_zones)
    else:
        origin_idx = np.array([geo.index(z) for z in origins])
    if lag < 0:
        raise ValueError("characteristic lag must be nonnegative")
    rows = []
    for o in origin_idx:
        dest_keep = np.arange(n_zones) != o
        for name, grid in characteristics.items():
            grid = np.asarray(grid, dtype=float)
            s = shares[o][dest_keep, lag:]  # share at t
            c = grid[dest_keep, : n_years - lag]  # characteristic at t - lag
            w = None
            if weights is not None:
                w = np.asarray(weights, dtype=float)[dest_keep, lag:]
            if difference:
                s = np.diff(s, axis=1)
                c = np.diff(c, axis=1)
                if w is not None:
                    w = w[:, 1:]
            sv, cv = s.reshape(-1), c.reshape(-1)
            wv = w.reshape(-1) if w is not None else np.ones_like(sv)
            ok = np.isfinite(sv) & np.isfinite(cv) & np.isfinite(wv)
            sv, cv, wv = sv[ok], cv[ok], wv[ok]
            row = {"origin": int(geo.zone_ids[o]), "characteristic": name, "n": int(sv.size)}
            if sv.size < 3 or np.allclose(cv, cv[0]):
                row.update(correlation=np.nan, slope=np.nan, se=np.nan, zero_variance=True)
                rows.append(row)
                continue
            row["zero_variance"] = False
            with np.errstate(invalid="ignore", divide="ignore"):
                row["correlation"] = float(np.corrcoef(sv, cv)[0, 1])
            X = np.column_stack([cv, np.ones_like(cv)])
            Xw = X * wv[:, None]
            beta = np.linalg.solve(X.T @ Xw, Xw.T @ sv)
            resid = sv - X @ beta
            s2 = float((wv * resid * resid).sum()) / (sv.size - 2)
            vcov = s2 * np.linalg.inv(X.T @ Xw)
            row["slope"] = float(beta[0])
            row["se"] = float(np.sqrt(vcov[0, 0]))
            rows.append(row)
    return rows


@dataclass(frozen=True)
class OriginLevelResult:
    """Origin-level reformulation of the destination Bartik regression."""

    origin_ids: np.ndarray
    years: np.ndarray
    ybar: np.ndarray
    xbar: np.ndarray
    shift: np.ndarray
    exposure: np.ndarray  # regression weights P_ot
    phi_origin_level: float
    se_origin_level: float
    phi_destination_level: float
    n_dropped_rows: int


def origin_level_transform(
    shares,
    stocks,
    y_grid,
    x_grid,
    geo: GeoRegistry,
    years: np.ndarray,
    extra_controls: np.ndarray | None = None,
    mask: np.ndarray | None = None,
) -> OriginLevelResult:
    """Re-express the destination Bartik regression at the origin level.

    Destination outcome and endogenous grids are residualized on zone
    and year effects, the per-origin share columns, and the exposure-sum
    interactions with year (plus any extra controls); exposure-weighted
    averages of the residuals then regress on the origin shift I_ot with
    origin and year effects under exposure weights.  The two estimates
    agree identically because the weighted origin moments reassemble the
    destination-side Bartik moments column for column.
    """
    shares = np.asarray(shares, dtype=float)
    stocks = np.asarray(stocks, dtype=float)
    n_zones, _, n_years = shares.shape
    idx = np.arange(n_zones)
    s = shares.copy()
    s[idx, idx, :] = 0.0
    if mask is not None:
        mask = np.asarray(mask, dtype=bool).reshape(n_zones, n_years)
        s = s * mask[None, :, :]  # shares of excluded destination cells drop out

    zone_f = np.repeat(np.arange(n_zones), n_years)
    year_f = np.tile(np.arange(n_years), n_zones)
    # controls that make the equivalence exact: per-origin share columns
    # and the exposure sum interacted with year
    share_cols = s.reshape(n_zones, -1).T  # (n, origins)
    exposure_dest = share_cols.sum(axis=1)  # sum over origins at each (d, t)
    year_inter = np.zeros((share_cols.shape[0], n_years))
    year_inter[np.arange(share_cols.shape[0]), year_f] = exposure_dest
    controls = [share_cols, year_inter]
    if extra_controls is not None:
        controls.append(np.asarray(extra_controls, dtype=float))
    controls = np.column_stack(controls)
    rz = Residualizer([zone_f, year_f], controls, mask=None if mask is None else mask.reshape(-1))

    y_perp = rz.residualize(np.asarray(y_grid, dtype=float).reshape(-1))
    x_perp = rz.residualize(np.asarray(x_grid, dtype=float).reshape(-1))
    b = rz.residualize((s * stocks[:, None, :]).sum(axis=0).reshape(-1))
    phi_dest = float((b @ y_perp) / (b @ x_perp))

    # exposure-weighted averages per (origin, year)
    exposure = s.sum(axis=1)  # (o, t)
    y_mat = y_perp.reshape(n_zones, n_years)
    x_mat = x_perp.reshape(n_zones, n_years)
    ybar = np.einsum("odt,dt->ot", s, y_mat)
    xbar = np.einsum("odt,dt->ot", s, x_mat)
    keep = exposure > 0
    n_dropped = int((~keep).sum())
    with np.errstate(divide="ignore", invalid="ignore"):
        ybar = np.where(keep, ybar / exposure, 0.0)
        xbar = np.where(keep, xbar / exposure, 0.0)

    flat_keep = keep.reshape(-1)
    o_rows = np.repeat(np.arange(n_zones), n_years)[flat_keep]
    t_rows = np.tile(np.arange(n_years), n_zones)[flat_keep]
    w = exposure.reshape(-1)[flat_keep]
    yb = ybar.reshape(-1)[flat_keep]
    xb = xbar.reshape(-1)[flat_keep]
    shift = stocks.reshape(-1)[flat_keep]

    block = absorb(np.column_stack([yb, xb, shift]), [o_rows, t_rows], weights=w)
    yt, xt, it = block.values.T
    den = float((w * it) @ xt)
    if den == 0.0:
        raise EstimationError("origin-level shift is orthogonal to the averaged endogenous variable")
    phi_origin = float((w * it) @ yt / den)
    e = yt - phi_origin * xt
    k = 1 + absorbed_dof([o_rows, t_rows])
    score = (w * it * e) ** 2
    se = float(np.sqrt(score.sum() * (w.size / max(w.size - k, 1))) / abs(den))

    return OriginLevelResult(
        origin_ids=geo.zone_ids[o_rows],
        years=np.asarray(years)[t_rows],
        ybar=yb,
        xbar=xb,
        shift=shift,
        exposure=w,
        phi_origin_level=phi_origin,
        se_origin_level=se,
        phi_destination_level=phi_dest,
        n_dropped_rows=n_dropped,
    )


@dataclass(frozen=True)
class HerfindahlReport:
    hhi_origin_year: float
    effective_size_origin_year: float
    largest_weight_origin_year: float
    hhi_origin: float
    effective_size_origin: float
    largest_weight_origin: float


def herfindahl_diagnostics(shares) -> HerfindahlReport:
    """Concentration of the exposure weights P_ot, across origin-year
    cells and across origins."""
    shares = np.asarray(shares, dtype=float)
    n_zones = shares.shape[0]
    idx = np.arange(n_zones)
    s = shares.copy()
    s[idx, idx, :] = 0.0
    w_ot = s.sum(axis=1)
    total = w_ot.sum()
    if total <= 0:
        raise EstimationError("exposure weights are all zero")

    def level(w):
        p = w.reshape(-1) / w.sum()
        hhi = float((p**2).sum())
        return hhi, 1.0 / hhi, float(p.max())

    h1, e1, m1 = level(w_ot)
    h2, e2, m2 = level(w_ot.sum(axis=1))
    return HerfindahlReport(h1, e1, m1, h2, e2, m2)


def ring_columns(values, geo: GeoRegistry, edges: Sequence[float]) -> np.ndarray:
    """Distance-ring sums of a (zone, year) series.

    Ring 1 is the zone's own value; ring r >= 2 sums the series over
    zones whose great-circle distance falls in (edge_{r-2}, edge_{r-1}]
    miles, with the first interval starting just above zero.
    """
    edges = [float(e) for e in edges]
    if any(b <= a for a, b in zip(edges, edges[1:])) or (edges and edges[0] <= 0):
        raise ValueError("ring edges must be positive and strictly increasing")
    values = np.asarray(values, dtype=float)
    n_zones, n_years = values.shape
    dist = geo.distance_matrix
    out = np.empty((n_zones, n_years, 1 + len(edges)))
    out[:, :, 0] = values
    lower = 0.0
    offdiag = ~np.eye(n_zones, dtype=bool)
    for r, upper in enumerate(edges, start=1):
        mask = (dist > lower) & (dist <= upper) & offdiag
        out[:, :, r] = mask @ values
        lower = upper
    return out


def distance_ring_design(flows, geo: GeoRegistry, edges: Sequence[float]):
    """Ring columns of the inflow series plus their names."""
    cols = ring_columns(flows.inflows, geo, edges)
    names = ["ring_1_own"]
    lower = 0.0
    for upper in edges:
        names.append(f"ring_({lower:g},{upper:g}]")
        lower = float(upper)
    return cols, tuple(names)


@dataclass(frozen=True)
class PlaceboResult:
    estimates: np.ndarray
    baseline: float
    mean: float
    sd: float
    ci_low: float
    ci_high: float
    rejection_rate: float
    n_draws: int
    excluded_zones: tuple[int, ...]

    def rows(self) -> list[dict]:
        return [{"draw_id": i, "estimate": float(v)} for i, v in enumerate(self.estimates)]


def permutation_placebo(
    y_grid,
    x_grid,
    z_grid,
    geo: GeoRegistry,
    n_draws: int,
    seed: int,
    controls: np.ndarray | None = None,
    identity_debug: bool = False,
) -> PlaceboResult:
    """Re-index outcomes to a random same-state zone and re-estimate.

    Each repetition draws an independent map R(d) uniform over the
    other zones of d's state (with replacement across repetitions) and
    refits the just-identified IV on ln Y_{R(d)t}.  Zones whose state
    has no alternative zone are excluded from the sample, with a note
    in the result.  The endogenous and instrument sides are residualized
    once; only the permuted outcome is re-residualized per draw.
    """
    y_grid = np.asarray(y_grid, dtype=float)
    x_grid = np.asarray(x_grid, dtype=float)
    z_grid = np.asarray(z_grid, dtype=float)
    n_zones, n_years = y_grid.shape
    candidates = geo.same_state_others
    keep_zone = np.array([c.size > 0 for c in candidates])
    excluded = tuple(int(z) for z in geo.zone_ids[~keep_zone])
    kz = np.where(keep_zone)[0]

    zone_f = np.repeat(np.arange(kz.size), n_years)
    year_f = np.tile(np.arange(n_years), kz.size)
    ctrl = None
    if controls is not None:
        ctrl = np.asarray(controls, dtype=float).reshape(n_zones, n_years, -1)[kz].reshape(kz.size * n_years, -1)
    rz = Residualizer([zone_f, year_f], ctrl)

    x = rz.residualize(x_grid[kz].reshape(-1))
    z = rz.residualize(z_grid[kz].reshape(-1))
    den = float(z @ x)
    if den == 0.0:
        raise EstimationError("instrument is orthogonal to the endogenous variable after residualization")

    g = zone_f  # cluster by zone
    n_g = kz.size
    n, k = x.shape[0], rz.dof + 1
    t_crit = stats.t.ppf(0.975, n_g - 1)

    def estimate(y_rows):
        yp = rz.residualize(y_rows)
        phi = float(z @ yp) / den
        e = yp - phi * x
        sums = np.bincount(g, weights=z * e, minlength=n_g)
        meat = float((sums**2).sum()) * (n_g / (n_g - 1.0)) * ((n - 1.0) / (n - k))
        se = np.sqrt(meat) / abs(den)
        return phi, se

    baseline, _ = estimate(y_grid[kz].reshape(-1))

    draws = np.empty(n_draws)
    rejections = 0
    for r in range(n_draws):
        rng = derive_rng(seed, "placebo", r)
        if identity_debug:
            mapped = kz
        else:
            mapped = np.array([rng.choice(candidates[d]) for d in kz])
        phi, se = estimate(y_grid[mapped].reshape(-1))
        draws[r] = phi
        if se > 0 and abs(phi / se) > t_crit:
            rejections += 1

    lo, hi = np.percentile(draws, [2.5, 97.5])
    return PlaceboResult(
        estimates=draws,
        baseline=baseline,
        mean=float(draws.mean()),
        sd=float(draws.std(ddof=1)) if n_draws > 1 else 0.0,
        ci_low=float(lo),
        ci_high=float(hi),
        rejection_rate=rejections / n_draws,
        n_draws=n_draws,
        excluded_zones=excluded,
    )
