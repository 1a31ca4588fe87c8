"""CSV interchange for panel bundles.

One directory holds one dataset: zones.csv, policies.csv, flows.csv,
stays.csv, stocks.csv, outcomes.csv, controls.csv (optional), and, for
simulated worlds, truth.json.  Loaders validate eagerly and raise
:class:`PanelValidationError` with row coordinates; nothing is coerced
silently.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np
import pandas as pd

from .geo import GeoRegistry
from .panels import (
    POLICY_FIELDS,
    FlowPanel,
    OutcomePanel,
    PanelBundle,
    PanelValidationError,
    PolicyPanel,
)

__all__ = ["load_panels", "write_panels", "write_truth", "read_truth"]

_CANONICAL_COLUMNS = {
    "zones": ("zone_id", "state_id", "lat", "lon"),
    "policies": ("state_id", "year", *POLICY_FIELDS),
    "flows": ("origin", "dest", "year", "count"),
    "stays": ("zone", "year", "count"),
    "stocks": ("zone", "year", "stock"),
    "outcomes": ("zone", "year", "scope", "value"),
    "controls": ("zone", "year", "name", "value"),
}


def _read(path: Path, table: str, schema: Mapping[str, Mapping[str, str]] | None) -> pd.DataFrame:
    if not path.exists():
        raise PanelValidationError([f"missing input file {path}"])
    df = pd.read_csv(path)
    rename = schema.get(table, {}) if schema else {}
    df = df.rename(columns={actual: canonical for canonical, actual in rename.items()})
    missing = [c for c in _CANONICAL_COLUMNS[table] if c not in df.columns]
    if missing:
        raise PanelValidationError([f"{path.name} lacks columns {missing}"])
    return df


def _cell_grid(df, zones, years, value_col, label, problems, zone_col="zone"):
    """Pivot long (zone, year, value) rows onto the (Z, T) grid."""
    grid = np.full((zones.size, years.size), np.nan)
    zone_pos = {int(z): i for i, z in enumerate(zones)}
    year0 = int(years[0])
    cells = zip(df[zone_col].to_numpy(), df["year"].to_numpy(), df[value_col].to_numpy(float))
    for z, year, value in cells:
        if int(z) not in zone_pos:
            problems.append(f"{label}: unknown zone {z}")
            continue
        t = int(year) - year0
        if t < 0 or t >= years.size:
            problems.append(f"{label}: year {year} outside flow panel years")
            continue
        i = zone_pos[int(z)]
        if not np.isnan(grid[i, t]):
            problems.append(f"{label}: duplicate row for (zone={z}, year={year})")
            continue
        grid[i, t] = value
    return grid


def load_panels(directory: str | Path, schema: Mapping[str, Mapping[str, str]] | None = None) -> PanelBundle:
    """Load one dataset directory into a validated :class:`PanelBundle`.

    ``schema`` optionally maps, per table, canonical column names to the
    names actually present in the files.
    """
    directory = Path(directory)
    problems: list[str] = []

    zones_df = _read(directory / "zones.csv", "zones", schema)
    if zones_df["zone_id"].duplicated().any():
        dup = zones_df.loc[zones_df["zone_id"].duplicated(), "zone_id"].tolist()
        raise PanelValidationError([f"zones.csv: duplicate zone ids {dup[:5]}"])
    geo = GeoRegistry(
        zone_ids=zones_df["zone_id"].to_numpy(np.int64),
        state_ids=zones_df["state_id"].astype(str).to_numpy(object),
        centroids=zones_df[["lat", "lon"]].to_numpy(float),
    )

    pol_df = _read(directory / "policies.csv", "policies", schema)
    states = np.unique(pol_df["state_id"].astype(str).to_numpy(object))
    pol_years = np.arange(int(pol_df["year"].min()), int(pol_df["year"].max()) + 1)
    state_pos = {s: i for i, s in enumerate(states)}
    columns = {f: np.full((states.size, pol_years.size), np.nan) for f in POLICY_FIELDS}
    seen = set()
    for row in pol_df.itertuples(index=False):
        key = (str(row.state_id), int(row.year))
        if key in seen:
            problems.append(f"policies.csv: duplicate row for {key}")
            continue
        seen.add(key)
        s = state_pos[str(row.state_id)]
        t = int(row.year) - int(pol_years[0])
        for f in POLICY_FIELDS:
            columns[f][s, t] = getattr(row, f)

    flows_df = _read(directory / "flows.csv", "flows", schema)
    stays_df = _read(directory / "stays.csv", "stays", schema)
    stocks_df = _read(directory / "stocks.csv", "stocks", schema)
    year_values = pd.concat([flows_df["year"], stays_df["year"], stocks_df["year"]])
    if year_values.empty:
        raise PanelValidationError(["no flow, stay, or stock rows"])
    years = np.arange(int(year_values.min()), int(year_values.max()) + 1)
    zone_pos = {int(z): i for i, z in enumerate(geo.zone_ids)}

    m = np.zeros((geo.n_zones, geo.n_zones, years.size))
    seen_flow = set()
    flow_rows = zip(
        flows_df["origin"].to_numpy(),
        flows_df["dest"].to_numpy(),
        flows_df["year"].to_numpy(),
        flows_df["count"].to_numpy(float),
    )
    for origin, dest, year, count in flow_rows:
        key = (int(origin), int(dest), int(year))
        if key in seen_flow:
            problems.append(f"flows.csv: duplicate row for (origin={key[0]}, dest={key[1]}, year={key[2]})")
            continue
        seen_flow.add(key)
        if key[0] == key[1]:
            problems.append(f"flows.csv: self-flow at (zone={key[0]}, year={key[2]}); stays belong in stays.csv")
            continue
        if key[0] not in zone_pos or key[1] not in zone_pos:
            problems.append(f"flows.csv: unknown zone in (origin={key[0]}, dest={key[1]}, year={key[2]})")
            continue
        m[zone_pos[key[0]], zone_pos[key[1]], key[2] - years[0]] = count

    stays = _cell_grid(stays_df, geo.zone_ids, years, "count", "stays.csv", problems)
    stocks = _cell_grid(stocks_df, geo.zone_ids, years, "stock", "stocks.csv", problems)
    i = np.arange(geo.n_zones)
    m[i, i, :] = np.nan_to_num(stays)
    stocks = np.nan_to_num(stocks)

    out_df = _read(directory / "outcomes.csv", "outcomes", schema)
    scopes = {}
    for scope, part in out_df.groupby("scope"):
        scopes[str(scope)] = _cell_grid(part, geo.zone_ids, years, "value", f"outcomes.csv[{scope}]", problems)
    controls = {}
    controls_path = directory / "controls.csv"
    if controls_path.exists():
        ctl_df = _read(controls_path, "controls", schema)
        for name, part in ctl_df.groupby("name"):
            controls[str(name)] = _cell_grid(part, geo.zone_ids, years, "value", f"controls.csv[{name}]", problems)

    if problems:
        raise PanelValidationError(problems)
    try:
        policies = PolicyPanel(states, pol_years, columns)
        flows = FlowPanel(geo.zone_ids, years, m, stocks)
        outcomes = OutcomePanel(geo.zone_ids, years, scopes, controls)
        return PanelBundle(geo=geo, policies=policies, flows=flows, outcomes=outcomes)
    except PanelValidationError:
        raise
    except ValueError as err:
        raise PanelValidationError([str(err)]) from err


def write_panels(bundle: PanelBundle, directory: str | Path) -> list[Path]:
    """Write one dataset directory; returns the files written.

    Output is deterministic: fixed row order, default float repr (which
    round-trips float64 exactly), no timestamps.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []

    def emit(name: str, df: pd.DataFrame):
        path = directory / name
        df.to_csv(path, index=False)
        written.append(path)

    geo, policies, flows, outcomes = bundle.geo, bundle.policies, bundle.flows, bundle.outcomes
    emit(
        "zones.csv",
        pd.DataFrame(
            {
                "zone_id": geo.zone_ids,
                "state_id": geo.state_ids,
                "lat": geo.centroids[:, 0],
                "lon": geo.centroids[:, 1],
            }
        ),
    )
    rows = {
        "state_id": np.repeat(policies.state_ids, policies.years.size),
        "year": np.tile(policies.years, policies.state_ids.size),
    }
    for f in POLICY_FIELDS:
        rows[f] = policies.columns[f].ravel()
    emit("policies.csv", pd.DataFrame(rows))

    o_idx, d_idx, t_idx = np.nonzero(flows.migrations)
    emit(
        "flows.csv",
        pd.DataFrame(
            {
                "origin": flows.zone_ids[o_idx],
                "dest": flows.zone_ids[d_idx],
                "year": flows.years[t_idx],
                "count": flows.migrations[o_idx, d_idx, t_idx],
            }
        ).sort_values(["year", "origin", "dest"], kind="stable", ignore_index=True),
    )
    z_idx, t_idx = np.nonzero(flows.stays)
    emit(
        "stays.csv",
        pd.DataFrame(
            {
                "zone": flows.zone_ids[z_idx],
                "year": flows.years[t_idx],
                "count": flows.stays[z_idx, t_idx],
            }
        ).sort_values(["year", "zone"], kind="stable", ignore_index=True),
    )
    emit(
        "stocks.csv",
        pd.DataFrame(
            {
                "zone": np.repeat(flows.zone_ids, flows.n_years),
                "year": np.tile(flows.years, flows.n_zones),
                "stock": flows.stocks.ravel(),
            }
        ),
    )
    frames = []
    for scope in sorted(outcomes.scopes):
        values = outcomes.scopes[scope]
        z_idx, t_idx = np.nonzero(np.isfinite(values))
        frames.append(
            pd.DataFrame(
                {
                    "zone": outcomes.zone_ids[z_idx],
                    "year": outcomes.years[t_idx],
                    "scope": scope,
                    "value": values[z_idx, t_idx],
                }
            )
        )
    emit("outcomes.csv", pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=list(_CANONICAL_COLUMNS["outcomes"])))
    if outcomes.controls:
        frames = []
        for name in sorted(outcomes.controls):
            values = outcomes.controls[name]
            z_idx, t_idx = np.nonzero(np.isfinite(values))
            frames.append(
                pd.DataFrame(
                    {
                        "zone": outcomes.zone_ids[z_idx],
                        "year": outcomes.years[t_idx],
                        "name": name,
                        "value": values[z_idx, t_idx],
                    }
                )
            )
        emit("controls.csv", pd.concat(frames, ignore_index=True))
    return written


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def write_truth(record: Mapping[str, object], path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(_jsonable(dict(record)), indent=2, sort_keys=True) + "\n")
    return path


def read_truth(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())
