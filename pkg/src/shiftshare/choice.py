"""Location-choice estimation on migration log odds and probability
prediction over the full choice set.

The estimating equation regresses ln(M_odt / M_oot) on destination-
minus-origin log policy gaps with high-dimensional fixed effects.
Probabilities come back out by exponentiating the fitted index of every
candidate destination against a stay option normalized to zero, which
reproduces the fitted log odds exactly on estimation cells.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .cluster import VceResult, cluster_vce, hc1_vce
from .errors import CollinearityError, PredictionError
from .geo import GeoRegistry
from .hdfe import absorb, absorbed_dof
from .panels import CREDIT_FIELDS, LogOddsRecord, PolicyPanel

__all__ = ["FeSpec", "ChoiceModelEstimates", "estimate_log_odds", "predict_migration_probabilities"]

PAIR_FACTORS = ("pair",)
MARGIN_FACTORS = ("origin", "destination")
KNOWN_FACTORS = (
    "pair",
    "origin",
    "destination",
    "year",
    "origin_state",
    "dest_state",
    "origin_state_year",
    "dest_state_year",
    "state_pair_year",
)
# factors whose level changes with the candidate destination
DEST_VARYING = {"pair", "destination", "dest_state", "dest_state_year", "state_pair_year"}


@dataclass(frozen=True)
class FeSpec:
    """Fixed-effect and clustering layout for the log-odds regression."""

    fe: tuple[str, ...] = ("pair", "year")
    cluster: tuple[str, ...] = ("pair", "origin_state_year", "dest_state_year")

    def __post_init__(self):
        for name in self.fe + self.cluster:
            if name not in KNOWN_FACTORS:
                raise ValueError(f"unknown factor {name!r}; known: {KNOWN_FACTORS}")
        if not self.fe:
            raise ValueError("log-odds regression requires at least one fixed effect")
        if "pair" in self.fe and set(self.fe) & set(MARGIN_FACTORS):
            raise ValueError("pair fixed effects already nest origin and destination margins")


def _record_arrays(records: Sequence[LogOddsRecord]):
    n = len(records)
    if n == 0:
        raise ValueError("no log-odds records")
    keys = list(records[0].deltas)
    origin = np.empty(n, dtype=np.int64)
    dest = np.empty(n, dtype=np.int64)
    year = np.empty(n, dtype=np.int64)
    lhs = np.empty(n)
    weight = np.empty(n)
    X = np.empty((n, len(keys)))
    for i, r in enumerate(records):
        if list(r.deltas) != keys:
            raise ValueError("records carry inconsistent policy delta sets")
        origin[i] = r.origin
        dest[i] = r.dest
        year[i] = r.year
        lhs[i] = r.lhs
        weight[i] = r.weight
        for j, k in enumerate(keys):
            X[i, j] = r.deltas[k]
    return keys, origin, dest, year, lhs, X, weight


def _factor_levels(name: str, origin, dest, year, geo: GeoRegistry):
    """Raw level labels of a named factor, as tuples where composite."""
    state = {int(z): s for z, s in zip(geo.zone_ids, geo.state_ids)}
    if name == "pair":
        return [(int(o), int(d)) for o, d in zip(origin, dest)]
    if name == "origin":
        return origin
    if name == "destination":
        return dest
    if name == "year":
        return year
    if name == "origin_state":
        return [state[int(o)] for o in origin]
    if name == "dest_state":
        return [state[int(d)] for d in dest]
    if name == "origin_state_year":
        return [(state[int(o)], int(t)) for o, t in zip(origin, year)]
    if name == "dest_state_year":
        return [(state[int(d)], int(t)) for d, t in zip(dest, year)]
    if name == "state_pair_year":
        return [(state[int(o)], state[int(d)], int(t)) for o, d, t in zip(origin, dest, year)]
    raise ValueError(f"unknown factor {name!r}")


def _encode(levels) -> tuple[np.ndarray, list]:
    """Dense codes plus ordered distinct labels for one factor."""
    if isinstance(levels, np.ndarray):
        keys, codes = np.unique(levels, return_inverse=True)
        return codes.astype(np.int64), list(keys)
    lookup: dict = {}
    codes = np.empty(len(levels), dtype=np.int64)
    for i, lev in enumerate(levels):
        codes[i] = lookup.setdefault(lev, len(lookup))
    return codes, list(lookup)


@dataclass(frozen=True)
class ChoiceModelEstimates:
    """Fitted log-odds model: slopes, layered fixed effects, intercept.

    ``fe_values[f]`` maps raw level labels to effects normalized to zero
    mean across levels; the removed constants live in ``intercept`` so
    slope + effects + intercept reproduce fitted values exactly.
    """

    beta: Mapping[str, float]
    vce: VceResult
    fe_spec: FeSpec
    fe_values: Mapping[str, Mapping[object, float]]
    intercept: float
    nobs: int
    r2_total: float
    r2_within: float
    sweeps: int

    @property
    def se(self) -> dict[str, float]:
        s = self.vce.se
        return {k: float(s[j]) for j, k in enumerate(self.beta)}

    @property
    def tax_field(self) -> str:
        for key in self.beta:
            if key.startswith("d_ln_1m_") and key != "d_ln_1m_citr":
                return key.removeprefix("d_ln_1m_")
        raise ValueError("no personal tax regressor among the deltas")

    @property
    def eta(self) -> float:
        """Reduced-form personal net-of-tax coefficient."""
        return float(self.beta[f"d_ln_1m_{self.tax_field}"])

    @property
    def eta_prime(self) -> dict[str, float]:
        """Reduced-form firm-side coefficients keyed by policy field."""
        own = f"d_ln_1m_{self.tax_field}"
        return {k.split("_")[-1]: float(v) for k, v in self.beta.items() if k != own}

    def index_components(self, policies: PolicyPanel, geo: GeoRegistry, years: np.ndarray):
        """(Z, T) slope part of the index per zone, plus field bookkeeping."""
        t0 = policies.year_index(int(years[0]))
        sl = slice(t0, t0 + years.size)
        state_rows = np.array([policies.state_index(s) for s in geo.state_ids])
        total = np.zeros((geo.n_zones, years.size))
        for key, coef in self.beta.items():
            f = key.removeprefix("d_ln_1m_").removeprefix("d_ln_1p_")
            total += coef * policies.log_level(f)[state_rows][:, sl]
        return total


def estimate_log_odds(
    records: Sequence[LogOddsRecord],
    geo: GeoRegistry,
    fe_spec: FeSpec = FeSpec(),
    tol: float = 1e-10,
    max_sweeps: int = 10_000,
) -> ChoiceModelEstimates:
    """Within-transform OLS of the migration log odds on policy gaps.

    Slopes match the dummy-variable regression; standard errors follow
    ``fe_spec.cluster`` through the multiway inclusion-exclusion
    formula (HC1 when no cluster dimensions are given).
    """
    keys, origin, dest, year, lhs, X, weight = _record_arrays(records)
    if np.any(weight != 1.0) and np.any(weight <= 0):
        raise ValueError("record weights must be positive")
    factor_levels = {f: _factor_levels(f, origin, dest, year, geo) for f in fe_spec.fe}
    encoded = {f: _encode(levels) for f, levels in factor_levels.items()}
    factor_codes = [encoded[f][0] for f in fe_spec.fe]

    for j, key in enumerate(keys):
        if np.unique(X[:, j]).size < 2:
            raise CollinearityError(key)

    block = np.column_stack([lhs, X])
    w = weight if np.any(weight != 1.0) else None
    result = absorb(block, factor_codes, weights=w, tol=tol, max_sweeps=max_sweeps)
    y_w = result.values[:, 0]
    X_w = result.values[:, 1:]

    # pivot-free collinearity check: each column against the previous ones
    scale = np.sqrt((X_w**2).sum(axis=0))
    r = np.linalg.qr(X_w, mode="r")
    for j, key in enumerate(keys):
        if abs(r[j, j]) < 1e-10 * max(scale[j], 1.0):
            raise CollinearityError(key)

    wvec = weight
    Xw = X_w * wvec[:, None]
    beta = np.linalg.solve(Xw.T @ X_w, Xw.T @ y_w)
    resid = y_w - X_w @ beta

    n_params = len(keys) + absorbed_dof(factor_codes)
    if fe_spec.cluster:
        dims = []
        for name in fe_spec.cluster:
            codes, _ = _encode(_factor_levels(name, origin, dest, year, geo))
            dims.append(codes)
        vce = cluster_vce(X_w * np.sqrt(wvec)[:, None], resid * np.sqrt(wvec), dims, n_params)
    else:
        vce = hc1_vce(X_w * np.sqrt(wvec)[:, None], resid * np.sqrt(wvec), n_params)

    g = lhs - X @ beta
    fe_fit = absorb(g, factor_codes, weights=w, tol=tol, max_sweeps=max_sweeps)
    intercept = 0.0
    fe_values: dict[str, dict] = {}
    for f, name in enumerate(fe_spec.fe):
        values = fe_fit.level_values[f].copy()
        m = values.mean()
        values -= m
        intercept += m
        _, labels = encoded[name]
        labels = [int(lab) if isinstance(lab, np.integer) else lab for lab in labels]
        fe_values[name] = {lab: float(v) for lab, v in zip(labels, values)}

    sse = float(resid @ resid * 1.0) if w is None else float(wvec @ (resid**2))
    ybar = float(np.average(lhs, weights=wvec))
    sst = float(wvec @ ((lhs - ybar) ** 2))
    ywbar = float(np.average(y_w, weights=wvec))
    sst_w = float(wvec @ ((y_w - ywbar) ** 2))
    return ChoiceModelEstimates(
        beta={k: float(b) for k, b in zip(keys, beta)},
        vce=vce,
        fe_spec=fe_spec,
        fe_values=fe_values,
        intercept=float(intercept),
        nobs=len(records),
        r2_total=1.0 - sse / sst if sst > 0 else np.nan,
        r2_within=1.0 - sse / sst_w if sst_w > 0 else np.nan,
        sweeps=result.sweeps,
    )


def _fe_grid(
    est: ChoiceModelEstimates,
    name: str,
    geo: GeoRegistry,
    years: np.ndarray,
    impute_rule: str,
):
    """Evaluate one factor's effects on the (o, c, t) prediction grid.

    Returns (values, missing) broadcastable against (Z, Z, T); under
    ``zero_mean`` a missing pair level imputes the origin's mean pair
    effect and every other missing level imputes the factor mean, zero.
    """
    Z, T = geo.n_zones, years.size
    table = est.fe_values[name]
    state = {int(z): s for z, s in zip(geo.zone_ids, geo.state_ids)}

    def lookup(shape, level_of):
        values = np.zeros(shape)
        missing = np.zeros(shape, dtype=bool)
        for idx in np.ndindex(shape):
            lev = level_of(*idx)
            if lev in table:
                values[idx] = table[lev]
            else:
                missing[idx] = True
        return values, missing

    zid = geo.zone_ids
    if name == "pair":
        values, missing = lookup((Z, Z), lambda o, c: (int(zid[o]), int(zid[c])))
        if impute_rule == "zero_mean":
            for o in range(Z):
                seen = ~missing[o]
                values[o, ~seen] = values[o, seen].mean() if seen.any() else 0.0
        return values[:, :, None], missing[:, :, None]
    if name == "origin":
        values, missing = lookup((Z,), lambda o: int(zid[o]))
        return values[:, None, None], missing[:, None, None]
    if name == "destination":
        values, missing = lookup((Z,), lambda c: int(zid[c]))
        return values[None, :, None], missing[None, :, None]
    if name == "year":
        values, missing = lookup((T,), lambda t: int(years[t]))
        return values[None, None, :], missing[None, None, :]
    if name == "origin_state":
        values, missing = lookup((Z,), lambda o: state[int(zid[o])])
        return values[:, None, None], missing[:, None, None]
    if name == "dest_state":
        values, missing = lookup((Z,), lambda c: state[int(zid[c])])
        return values[None, :, None], missing[None, :, None]
    if name == "origin_state_year":
        values, missing = lookup((Z, T), lambda o, t: (state[int(zid[o])], int(years[t])))
        return values[:, None, :], missing[:, None, :]
    if name == "dest_state_year":
        values, missing = lookup((Z, T), lambda c, t: (state[int(zid[c])], int(years[t])))
        return values[None, :, :], missing[None, :, :]
    if name == "state_pair_year":
        values, missing = lookup((Z, Z, T), lambda o, c, t: (state[int(zid[o])], state[int(zid[c])], int(years[t])))
        return values, missing
    raise ValueError(f"unknown factor {name!r}")


def predict_migration_probabilities(
    est: ChoiceModelEstimates,
    policies: PolicyPanel,
    geo: GeoRegistry,
    years: np.ndarray,
    impute_rule: str = "zero_mean",
) -> np.ndarray:
    """(Z, Z, T) choice probabilities over every destination and stay.

    Entry ``[o, c, t]`` is the probability that a unit starting in zone
    index ``o`` in year ``t`` picks zone ``c``; rows sum to one.  Each
    destination's index is the fitted log-odds value of the would-be
    record (o, c, t), the stay index is zero, and unobserved
    fixed-effect levels resolve per ``impute_rule``: ``zero_mean``
    imputes the normalization mean, ``drop`` removes the destination
    from the choice set, ``strict`` raises.
    """
    if impute_rule not in {"zero_mean", "drop", "strict"}:
        raise ValueError(f"unknown impute rule {impute_rule!r}")
    years = np.asarray(years, dtype=np.int64)
    for s in geo.states:
        policies.state_index(s)
    for y in (years[0], years[-1]):
        policies.year_index(int(y))

    zone_logs = est.index_components(policies, geo, years)  # (Z, T)
    V = zone_logs[None, :, :] - zone_logs[:, None, :] + est.intercept
    dropped = np.zeros(V.shape, dtype=bool)
    i = np.arange(geo.n_zones)
    for name in est.fe_spec.fe:
        values, missing = _fe_grid(est, name, geo, years, impute_rule)
        miss = np.broadcast_to(missing, V.shape).copy()
        miss[i, i, :] = False  # the stay index never consults its own levels
        if miss.any():
            if impute_rule == "strict":
                raise PredictionError(f"missing {name} level at prediction time")
            if impute_rule == "drop" and name in DEST_VARYING:
                dropped |= miss
        V = V + values

    V[i, i, :] = 0.0  # the stay option is always available
    V = V - V.max(axis=1, keepdims=True)
    P = np.exp(V)
    P[dropped] = 0.0
    P /= P.sum(axis=1, keepdims=True)
    return P
