"""Panel containers for flows, stocks, policies, and outcomes.

All containers are keyed by sorted integer zone ids, string state
labels, and consecutive integer years, and store rectangular numpy
arrays internally; CSV interchange lives in :mod:`shiftshare.io`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np

from .geo import GeoRegistry

__all__ = [
    "PanelValidationError",
    "PolicyPanel",
    "FlowPanel",
    "OutcomePanel",
    "PanelBundle",
    "LogOddsRecord",
    "build_flow_tables",
    "build_log_odds",
    "RATE_FIELDS",
    "CREDIT_FIELDS",
    "BINARY_FIELDS",
    "POLICY_FIELDS",
    "delta_key",
]

RATE_FIELDS = ("atr95", "atr99", "atr50", "mtr", "aptr", "citr")
CREDIT_FIELDS = ("itc", "rtc")
BINARY_FIELDS = ("ts_low", "udda", "uflra", "ufta")
POLICY_FIELDS = RATE_FIELDS + CREDIT_FIELDS + BINARY_FIELDS


class PanelValidationError(ValueError):
    """Input data violates a panel contract; carries every violation found."""

    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


def delta_key(f: str) -> str:
    """Regressor name for the destination-minus-origin log policy gap."""
    if f in CREDIT_FIELDS:
        return f"d_ln_1p_{f}"
    if f in RATE_FIELDS:
        return f"d_ln_1m_{f}"
    raise ValueError(f"no log transform for policy field {f!r}")


def _check_years(years: np.ndarray, problems: list[str]):
    if years.ndim != 1 or years.size == 0:
        problems.append("empty year axis")
    elif not np.all(np.diff(years) == 1):
        problems.append("years must be consecutive integers")


@dataclass(frozen=True)
class PolicyPanel:
    """State-by-year policy variables, rectangular and typed by field."""

    state_ids: np.ndarray
    years: np.ndarray
    columns: Mapping[str, np.ndarray]

    def __post_init__(self):
        states = np.asarray(self.state_ids, dtype=object)
        years = np.asarray(self.years, dtype=np.int64)
        problems: list[str] = []
        if states.size != np.unique(states).size:
            problems.append("duplicate state ids")
        _check_years(years, problems)
        cols = {}
        for name, values in self.columns.items():
            arr = np.asarray(values, dtype=float)
            if arr.shape != (states.size, years.size):
                problems.append(f"column {name} has shape {arr.shape}, want {(states.size, years.size)}")
                continue
            bad = np.argwhere(~np.isfinite(arr))
            for s, t in bad[:5]:
                problems.append(f"missing policy value for {name} at ({states[s]}, {years[t]})")
            if name in RATE_FIELDS:
                bad = np.argwhere((arr < 0.0) | (arr >= 1.0))
                for s, t in bad[:5]:
                    problems.append(f"{name} out of [0, 1) at ({states[s]}, {years[t]})")
            elif name in CREDIT_FIELDS:
                bad = np.argwhere(arr < 0.0)
                for s, t in bad[:5]:
                    problems.append(f"negative {name} at ({states[s]}, {years[t]})")
            elif name in BINARY_FIELDS:
                bad = np.argwhere((arr != 0.0) & (arr != 1.0))
                for s, t in bad[:5]:
                    problems.append(f"non-binary {name} at ({states[s]}, {years[t]})")
            cols[name] = arr
        if problems:
            raise PanelValidationError(problems)
        object.__setattr__(self, "state_ids", states)
        object.__setattr__(self, "years", years)
        object.__setattr__(self, "columns", cols)

    @cached_property
    def _state_index(self) -> dict[str, int]:
        return {s: i for i, s in enumerate(self.state_ids)}

    def state_index(self, state_id: str) -> int:
        try:
            return self._state_index[state_id]
        except KeyError:
            raise KeyError(f"unknown state {state_id!r}") from None

    def year_index(self, year: int) -> int:
        t = int(year) - int(self.years[0])
        if t < 0 or t >= self.years.size:
            raise KeyError(f"year {year} outside policy panel")
        return t

    def values(self, f: str) -> np.ndarray:
        try:
            return self.columns[f]
        except KeyError:
            raise KeyError(f"policy field {f!r} not in panel") from None

    def log_level(self, f: str) -> np.ndarray:
        """(S, T) log policy level: ln(1-x) for rates, ln(1+x) for credits."""
        if f in CREDIT_FIELDS:
            return np.log1p(self.values(f))
        return np.log1p(-self.values(f))

    def replace(self, **new_columns: np.ndarray) -> "PolicyPanel":
        cols = dict(self.columns)
        cols.update(new_columns)
        return PolicyPanel(self.state_ids, self.years, cols)


@dataclass(frozen=True)
class FlowPanel:
    """Origin-destination flow counts, stay counts, and origin stocks.

    ``m[o, d, t]`` counts moves from zone index ``o`` to ``d`` between
    years ``t`` and ``t+1``; the diagonal holds stays.  ``stocks[o, t]``
    is the population at ``o`` at the start of year ``t``; movers plus
    stayers never exceed it (some units drop out of observation).
    """

    zone_ids: np.ndarray
    years: np.ndarray
    m: np.ndarray
    stocks: np.ndarray

    def __post_init__(self):
        zones = np.asarray(self.zone_ids, dtype=np.int64)
        years = np.asarray(self.years, dtype=np.int64)
        m = np.asarray(self.m, dtype=float)
        stocks = np.asarray(self.stocks, dtype=float)
        problems: list[str] = []
        if not np.all(np.diff(zones) > 0):
            problems.append("zone ids must be sorted and unique")
        _check_years(years, problems)
        if m.shape != (zones.size, zones.size, years.size):
            problems.append(f"flow array has shape {m.shape}, want {(zones.size,) * 2 + (years.size,)}")
        if stocks.shape != (zones.size, years.size):
            problems.append(f"stock array has shape {stocks.shape}, want {(zones.size, years.size)}")
        if problems:
            raise PanelValidationError(problems)
        neg = np.argwhere(m < 0)
        for o, d, t in neg[:5]:
            problems.append(f"negative count at (origin={zones[o]}, dest={zones[d]}, year={years[t]})")
        neg = np.argwhere(stocks < 0)
        for o, t in neg[:5]:
            problems.append(f"negative stock at (zone={zones[o]}, year={years[t]})")
        if not problems:
            leavers = m.sum(axis=1)
            bad = np.argwhere(leavers > stocks + 1e-9)
            for o, t in bad[:5]:
                problems.append(
                    f"movers plus stayers exceed stock at (zone={zones[o]}, year={years[t]}): "
                    f"{leavers[o, t]} > {stocks[o, t]}"
                )
        if problems:
            raise PanelValidationError(problems)
        object.__setattr__(self, "zone_ids", zones)
        object.__setattr__(self, "years", years)
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "stocks", stocks)

    @property
    def n_zones(self) -> int:
        return self.zone_ids.size

    @property
    def n_years(self) -> int:
        return self.years.size

    @cached_property
    def migrations(self) -> np.ndarray:
        """(Z, Z, T) flows with the stay diagonal zeroed."""
        out = self.m.copy()
        i = np.arange(self.n_zones)
        out[i, i, :] = 0.0
        return out

    @cached_property
    def inflows(self) -> np.ndarray:
        """(Z, T) arrivals from any other zone."""
        return self.migrations.sum(axis=0)

    @cached_property
    def stays(self) -> np.ndarray:
        """(Z, T) stay counts (the flow diagonal)."""
        i = np.arange(self.n_zones)
        return self.m[i, i, :]

    @cached_property
    def observed_shares(self) -> np.ndarray:
        """(Z, Z, T) flow shares m/stock; zero where the stock is zero."""
        with np.errstate(invalid="ignore", divide="ignore"):
            shares = self.m / self.stocks[:, None, :]
        return np.where(self.stocks[:, None, :] > 0, shares, 0.0)


@dataclass(frozen=True)
class OutcomePanel:
    """Zone-by-year outcomes per scope plus named controls.

    Missing outcomes are explicit NaN, never silent zeros.
    """

    zone_ids: np.ndarray
    years: np.ndarray
    scopes: Mapping[str, np.ndarray]
    controls: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        zones = np.asarray(self.zone_ids, dtype=np.int64)
        years = np.asarray(self.years, dtype=np.int64)
        problems: list[str] = []
        if not np.all(np.diff(zones) > 0):
            problems.append("zone ids must be sorted and unique")
        _check_years(years, problems)
        shape = (zones.size, years.size)
        scopes = {}
        for name, values in self.scopes.items():
            arr = np.asarray(values, dtype=float)
            if arr.shape != shape:
                problems.append(f"outcome {name} has shape {arr.shape}, want {shape}")
                continue
            bad = np.argwhere(arr < 0)
            for z, t in bad[:5]:
                problems.append(f"negative outcome {name} at (zone={zones[z]}, year={years[t]})")
            scopes[name] = arr
        controls = {}
        for name, values in self.controls.items():
            arr = np.asarray(values, dtype=float)
            if arr.shape != shape:
                problems.append(f"control {name} has shape {arr.shape}, want {shape}")
                continue
            controls[name] = arr
        for part in ("y_external", "y_internal"):
            if "y_all" in scopes and part in scopes:
                both = np.isfinite(scopes["y_all"]) & np.isfinite(scopes[part])
                bad = np.argwhere(both & (scopes[part] > scopes["y_all"] + 1e-9))
                for z, t in bad[:5]:
                    problems.append(f"{part} exceeds y_all at (zone={zones[z]}, year={years[t]})")
        if problems:
            raise PanelValidationError(problems)
        object.__setattr__(self, "zone_ids", zones)
        object.__setattr__(self, "years", years)
        object.__setattr__(self, "scopes", scopes)
        object.__setattr__(self, "controls", controls)

    def scope(self, name: str) -> np.ndarray:
        try:
            return self.scopes[name]
        except KeyError:
            raise KeyError(f"outcome scope {name!r} not in panel") from None


@dataclass(frozen=True)
class PanelBundle:
    """Everything one analysis run consumes."""

    geo: GeoRegistry
    policies: PolicyPanel
    flows: FlowPanel
    outcomes: OutcomePanel

    def __post_init__(self):
        problems = []
        if not np.array_equal(self.geo.zone_ids, self.flows.zone_ids):
            problems.append("flow panel zones differ from registry zones")
        if not np.array_equal(self.geo.zone_ids, self.outcomes.zone_ids):
            problems.append("outcome panel zones differ from registry zones")
        if not np.array_equal(self.flows.years, self.outcomes.years):
            problems.append("outcome years differ from flow years")
        missing_states = set(self.geo.states) - set(self.policies.state_ids)
        if missing_states:
            problems.append(f"states without policy coverage: {sorted(missing_states)}")
        flow_years = set(self.flows.years.tolist())
        if not flow_years <= set(self.policies.years.tolist()):
            problems.append("flow years outside policy year support")
        if problems:
            raise PanelValidationError(problems)

    @cached_property
    def zone_state_index(self) -> np.ndarray:
        """(Z,) index of each zone's state in the policy panel."""
        return np.array([self.policies.state_index(s) for s in self.geo.state_ids], dtype=np.int64)

    def zone_policy(self, f: str, log: bool = False) -> np.ndarray:
        """(Z, T) policy values (or log levels) mapped to zones, flow years."""
        values = self.policies.log_level(f) if log else self.policies.values(f)
        t0 = self.policies.year_index(int(self.flows.years[0]))
        return values[self.zone_state_index][:, t0 : t0 + self.flows.n_years]


@dataclass(frozen=True)
class LogOddsRecord:
    """One origin-destination-year cell of the migration log-odds design."""

    origin: int
    dest: int
    year: int
    lhs: float
    deltas: Mapping[str, float]
    weight: float = 1.0


def build_flow_tables(
    histories: Iterable[tuple],
    top_flags: Iterable[tuple[object, int]],
    geo: GeoRegistry,
) -> FlowPanel:
    """Tally flows, stays, and stocks from residence histories.

    ``histories`` yields ``(unit_id, year, zone_id)`` rows, optionally
    with a fourth frequency column used to resolve several records in
    one year (highest frequency wins, first observed breaks ties).
    Without frequencies, conflicting records are an error.  A unit
    counts toward the year-``t`` stock of its zone, and toward a flow,
    only when ``(unit_id, t)`` is in ``top_flags``; the move is indexed
    by the first year.
    """
    resolved: dict[tuple[object, int], tuple[int, float, int]] = {}
    problems: list[str] = []
    for row_no, row in enumerate(histories):
        unit, year, zone = row[0], int(row[1]), int(row[2])
        count = float(row[3]) if len(row) > 3 and row[3] is not None else np.nan
        key = (unit, year)
        if key not in resolved:
            resolved[key] = (zone, count, row_no)
            continue
        zone0, count0, row0 = resolved[key]
        if zone == zone0:
            continue
        if np.isnan(count) or np.isnan(count0):
            problems.append(f"unit {unit!r} has conflicting zones in {year} and no frequencies")
        elif count > count0:
            resolved[key] = (zone, count, row_no)
    if problems:
        raise PanelValidationError(sorted(set(problems)))

    flags = set(top_flags)
    flow_years = sorted({year for (_, year) in flags})
    if not flow_years:
        raise PanelValidationError(["no flagged unit-years"])
    years = np.arange(flow_years[0], flow_years[-1] + 1)
    n_zones, n_years = geo.n_zones, years.size
    m = np.zeros((n_zones, n_zones, n_years))
    stocks = np.zeros((n_zones, n_years))
    for unit, year in flags:
        here = resolved.get((unit, year))
        if here is None:
            continue
        t = year - years[0]
        o = geo.index(here[0])
        stocks[o, t] += 1
        nxt = resolved.get((unit, year + 1))
        if nxt is not None:
            m[o, geo.index(nxt[0]), t] += 1
    return FlowPanel(geo.zone_ids, years, m, stocks)


DEFAULT_FIRM_FIELDS = ("citr", "itc", "rtc")


def build_log_odds(
    bundle: PanelBundle,
    tax_field: str = "atr95",
    firm_fields: Sequence[str] = DEFAULT_FIRM_FIELDS,
) -> list[LogOddsRecord]:
    """Migration-to-stay log odds with log policy gaps, one record per
    origin-destination-year cell where both flows are positive.

    Gaps are destination minus origin: ln(1-tax) for rates and
    ln(1+credit) for credits, evaluated at the states of the two zones
    in the flow year.
    """
    flows, geo = bundle.flows, bundle.geo
    fields = [tax_field, *firm_fields]
    levels = {f: bundle.zone_policy(f, log=True) for f in fields}
    mig = flows.migrations
    stays = flows.stays
    o_idx, d_idx, t_idx = np.nonzero((mig > 0) & (stays[:, None, :] > 0))
    lhs = np.log(mig[o_idx, d_idx, t_idx]) - np.log(stays[o_idx, t_idx])
    records = []
    for n in range(o_idx.size):
        o, d, t = int(o_idx[n]), int(d_idx[n]), int(t_idx[n])
        deltas = {delta_key(f): float(levels[f][d, t] - levels[f][o, t]) for f in fields}
        records.append(
            LogOddsRecord(
                origin=int(flows.zone_ids[o]),
                dest=int(flows.zone_ids[d]),
                year=int(flows.years[t]),
                lhs=float(lhs[n]),
                deltas=deltas,
            )
        )
    return records
