"""Event-study designs for dynamic flow effects.

The event-study regression puts first differences of the inflow series
at each event time j on the right-hand side, replaces the columns at
both window ends with cumulative bins truncated at the panel boundary,
and normalizes the j = -1 coefficient to zero.  Within the span of
zone fixed effects this is an exact reparameterization of a
distributed-lag model in inflow levels with lags j_lower+1 .. j_upper:
both forms share fitted values and residuals, and the event
coefficients are partial sums of the lag coefficients.  Instrument
differences are binned the same way, one block per Bartik variant,
with the j = -1 column dropped to mirror the normalization (it is
collinear with the rest inside the fixed-effect span).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .ivreg import IvEstimates, fit_2sls

__all__ = [
    "EventDesign",
    "EventStudyFit",
    "build_event_design",
    "fit_iv_event_study",
    "fit_distributed_lag",
    "cumulative_from_lags",
]


@dataclass(frozen=True)
class EventDesign:
    """Stacked (zone, year) rows with event-difference and lag-level columns.

    Rows keep only years with full support for every interior
    difference: the first j_upper years and the last -j_lower years of
    the panel are dropped so endpoint bins are the only truncated
    columns.
    """

    window: tuple[int, int]
    event_times: tuple[int, ...]  # window without -1
    lag_times: tuple[int, ...]  # j_lower+1 .. j_upper
    zone_rows: np.ndarray  # (n,) zone index into geo order
    year_rows: np.ndarray  # (n,) calendar year
    event_columns: np.ndarray  # (n, len(event_times)) binned differences
    lag_columns: np.ndarray  # (n, len(lag_times)) lagged levels
    event_instruments: np.ndarray  # (n, q) binned instrument differences
    lag_instruments: np.ndarray  # (n, q) lagged instrument levels
    instrument_variants: tuple[str, ...]

    @property
    def event_names(self) -> tuple[str, ...]:
        return tuple(f"dM[{j}]" for j in self.event_times)

    @property
    def lag_names(self) -> tuple[str, ...]:
        return tuple(f"M[t-{h}]" if h >= 0 else f"M[t+{-h}]" for h in self.lag_times)

    def select_grid(self, grid: np.ndarray, years: np.ndarray) -> np.ndarray:
        """Pull the row values of a (zone, year) grid aligned to this design."""
        grid = np.asarray(grid, dtype=float)
        year_pos = {int(y): i for i, y in enumerate(years)}
        cols = np.array([year_pos[int(t)] for t in self.year_rows])
        return grid[self.zone_rows, cols]

    def subset(self, mask: np.ndarray) -> "EventDesign":
        """Restrict to rows where ``mask`` is true (e.g. finite outcomes)."""
        mask = np.asarray(mask, dtype=bool)
        return replace(
            self,
            zone_rows=self.zone_rows[mask],
            year_rows=self.year_rows[mask],
            event_columns=self.event_columns[mask],
            lag_columns=self.lag_columns[mask],
            event_instruments=self.event_instruments[mask],
            lag_instruments=self.lag_instruments[mask],
        )


@dataclass(frozen=True)
class EventStudyFit:
    mu: Mapping[int, float]  # includes the normalized -1 entry at 0.0
    se: Mapping[int, float]
    estimates: IvEstimates
    window: tuple[int, int]

    def table(self, level: float = 0.95) -> list[dict]:
        from scipy import stats

        crit = stats.t.ppf(0.5 + level / 2.0, self.estimates.vce.df_t)
        rows = []
        for j in sorted(self.mu):
            m, s = self.mu[j], self.se[j]
            rows.append(
                {
                    "j": j,
                    "mu_hat": m,
                    "se": s,
                    "ci_low": m - crit * s,
                    "ci_high": m + crit * s,
                }
            )
        return rows


def _binned_differences(series: np.ndarray, kept: np.ndarray, window: tuple[int, int]) -> np.ndarray:
    """Difference columns M[t-j] - M[t-j-1] with endpoint bins.

    ``series`` is (zones, years); ``kept`` holds year indices with full
    interior support.  The j_lower column accumulates everything beyond
    the lead end (panel-final level minus M[t-j_lower-1]); the j_upper
    column accumulates everything beyond the lag end (M[t-j_upper]
    minus panel-initial level).
    """
    j_lo, j_hi = window
    cols = []
    for j in range(j_lo, j_hi + 1):
        if j == j_lo:
            col = series[:, -1][:, None] - series[:, kept - j_lo - 1]
        elif j == j_hi:
            col = series[:, kept - j_hi] - series[:, 0][:, None]
        else:
            col = series[:, kept - j] - series[:, kept - j - 1]
        cols.append(col)
    return np.stack(cols, axis=-1)  # (zones, kept_years, n_cols)


def build_event_design(
    flows,
    window: tuple[int, int],
    instrument_series: Mapping[str, np.ndarray],
) -> EventDesign:
    """Assemble the event-study design from a flow panel.

    Parameters
    ----------
    flows : FlowPanel
        Supplies the inflow series and year axis.
    window : (j_lower, j_upper)
        Event times; must satisfy j_lower <= -1 and j_upper >= 0.
    instrument_series : mapping variant -> (zones, years) array
        One Bartik series per variant to difference alongside the flows.
    """
    j_lo, j_hi = int(window[0]), int(window[1])
    if j_hi < 0:
        raise ValueError("window upper end must be >= 0")
    if j_lo > -1:
        raise ValueError("window lower end must be <= -1")
    M = flows.inflows
    n_zones, n_years = M.shape
    if j_hi - j_lo > n_years - 1:
        raise ValueError("panel too short for the requested window")
    kept = np.arange(j_hi, n_years + j_lo)
    if kept.size == 0:
        raise ValueError("no years remain after endpoint trimming")

    event_times = tuple(j for j in range(j_lo, j_hi + 1) if j != -1)
    lag_times = tuple(range(j_lo + 1, j_hi + 1))
    keep_cols = [j - j_lo for j in event_times]

    ev = _binned_differences(M, kept, (j_lo, j_hi))[:, :, keep_cols]
    lag = np.stack([M[:, kept - h] for h in lag_times], axis=-1)

    variants = tuple(instrument_series)
    ev_z, lag_z = [], []
    for name in variants:
        series = np.asarray(instrument_series[name], dtype=float)
        if series.shape != M.shape:
            raise ValueError(f"instrument series {name!r} is not aligned with the flow panel")
        ev_z.append(_binned_differences(series, kept, (j_lo, j_hi))[:, :, keep_cols])
        lag_z.append(np.stack([series[:, kept - h] for h in lag_times], axis=-1))

    n = n_zones * kept.size
    zone_rows = np.repeat(np.arange(n_zones), kept.size)
    year_rows = np.tile(flows.years[kept], n_zones)

    def flat(block_list):
        stacked = np.concatenate(block_list, axis=-1) if block_list else np.empty((n_zones, kept.size, 0))
        return stacked.reshape(n, stacked.shape[-1])

    return EventDesign(
        window=(j_lo, j_hi),
        event_times=event_times,
        lag_times=lag_times,
        zone_rows=zone_rows,
        year_rows=year_rows,
        event_columns=ev.reshape(n, len(event_times)),
        lag_columns=lag.reshape(n, len(lag_times)),
        event_instruments=flat(ev_z),
        lag_instruments=flat(lag_z),
        instrument_variants=variants,
    )


def _fit(design, outcome_rows, endog, endog_names, instruments, exog, exog_names, cluster_dims):
    fe = [design.zone_rows, design.year_rows]
    return fit_2sls(
        outcome_rows,
        endog,
        instruments,
        exog=exog,
        endog_names=endog_names,
        exog_names=exog_names,
        fe=fe,
        cluster=cluster_dims,
        diagnostics=False,
    )


def fit_iv_event_study(
    design: EventDesign,
    outcome_rows,
    exog=None,
    exog_names: Sequence[str] | None = None,
    cluster_dims=None,
) -> EventStudyFit:
    """2SLS of the outcome on binned flow differences, instrumented by
    the stacked binned instrument differences.  Returns event
    coefficients with the j = -1 normalization entry pinned at zero."""
    if cluster_dims is None:
        cluster_dims = [design.zone_rows]
    est = _fit(
        design,
        np.asarray(outcome_rows, dtype=float),
        design.event_columns,
        design.event_names,
        design.event_instruments,
        exog,
        tuple(exog_names) if exog_names else None,
        cluster_dims,
    )
    mu = {-1: 0.0}
    se = {-1: 0.0}
    ses = est.se
    for j, name in zip(design.event_times, design.event_names):
        mu[j] = est.params[name]
        se[j] = ses[name]
    return EventStudyFit(mu=mu, se=se, estimates=est, window=design.window)


def fit_distributed_lag(
    design: EventDesign,
    outcome_rows,
    exog=None,
    exog_names: Sequence[str] | None = None,
    cluster_dims=None,
) -> IvEstimates:
    """The lag-level twin of the event-study fit on the same rows."""
    if cluster_dims is None:
        cluster_dims = [design.zone_rows]
    return _fit(
        design,
        np.asarray(outcome_rows, dtype=float),
        design.lag_columns,
        design.lag_names,
        design.lag_instruments,
        exog,
        tuple(exog_names) if exog_names else None,
        cluster_dims,
    )


def cumulative_from_lags(lag_coef: Mapping[int, float], window: tuple[int, int]) -> dict[int, float]:
    """Map lag-level coefficients to event coefficients.

    mu_j = sum of lag coefficients from 0 to j for j >= 0 and minus the
    sum from j+1 to -1 for j <= -2; mu_{-1} = 0 by construction.
    """
    j_lo, j_hi = window
    out = {-1: 0.0}
    for j in range(0, j_hi + 1):
        out[j] = float(sum(lag_coef[h] for h in range(0, j + 1)))
    for j in range(j_lo, -1):
        out[j] = -float(sum(lag_coef[h] for h in range(j + 1, 0)))
    return out
