"""End-to-end analysis stages behind the command line.

A :class:`Pipeline` binds one :class:`RunConfig` to one output
directory, caches the expensive intermediates (choice fit, predicted
probabilities, instrument grids) across stages, and emits a fixed set
of CSV/JSON artifacts plus ``manifest.json`` with content digests.
Reruns with identical inputs and config produce byte-identical files;
nothing carries a timestamp.  A stage that fails removes whatever it
had already written and surfaces the failing stage by name.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from . import _accel
from .choice import ChoiceModelEstimates, FeSpec, estimate_log_odds, predict_migration_probabilities
from .config import RunConfig, SpecGrid
from .counterfactual import (
    aggregate_to_state,
    counterfactual_flows,
    counterfactual_productivity,
    equalize_taxes,
    national_decomposition,
)
from .diagnostics import (
    Residualizer,
    distance_ring_design,
    herfindahl_diagnostics,
    origin_level_transform,
    permutation_placebo,
    ring_columns,
    rotemberg_decompose,
    share_balance,
)
from .dynamics import build_event_design, fit_iv_event_study
from .errors import EstimationError
from .instruments import VARIANT_NAMES, build_bartik, initial_shares
from .io import _jsonable, load_panels, write_panels, write_truth
from .ivreg import IvEstimates, fit_2sls, fit_fe_ols
from .panels import PanelBundle, build_log_odds, delta_key
from .simulate import SimConfig, simulate_world

__all__ = ["Pipeline", "StageError", "DestinationDesign", "DATA_FILES"]

DATA_FILES = (
    "zones.csv",
    "policies.csv",
    "flows.csv",
    "stays.csv",
    "stocks.csv",
    "outcomes.csv",
    "controls.csv",
    "truth.json",
)


class StageError(RuntimeError):
    """One pipeline stage failed; partial outputs have been removed."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def _level_key(f: str) -> str:
    """Log-level policy column name, e.g. ln_1m_atr95."""
    return delta_key(f).removeprefix("d_")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def transform_outcome(grid: np.ndarray, transform: str) -> np.ndarray:
    """Outcome transform on the (zone, year) grid; non-finite results
    become NaN so downstream masks treat them as missing."""
    grid = np.asarray(grid, dtype=float)
    if transform == "log1p":
        return np.log1p(grid)
    if transform == "log":
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.log(grid)
        out[~np.isfinite(out)] = np.nan
        return out
    raise ValueError(f"unknown outcome transform {transform!r}")


@dataclass(frozen=True)
class DestinationDesign:
    """Stacked (zone, year) rows of the destination-level regression."""

    y: np.ndarray  # kept rows, transformed outcome
    endog: np.ndarray  # (n, 1) inflows
    exog: np.ndarray  # (n, k); k may be zero
    exog_names: tuple[str, ...]
    fe: list
    cluster: list
    zone_rows: np.ndarray
    year_rows: np.ndarray  # year index 0..T-1 on kept rows
    kept: np.ndarray  # (Z*T,) row mask into the flattened grid
    y_grid: np.ndarray  # (Z, T) transformed outcome, NaN where missing
    factors_full: list  # full-grid factor arrays matching ``fe``
    exog_full: np.ndarray  # (Z*T, k) exog columns on the full grid
    tax_term: str | None
    shape: tuple[int, int]

    def to_grid(self, rows: np.ndarray, keep_mask: np.ndarray | None = None) -> np.ndarray:
        """Scatter kept-row values back onto a NaN-filled (Z, T) grid."""
        flat = np.where(self.kept)[0]
        if keep_mask is not None:
            flat = flat[np.asarray(keep_mask, dtype=bool)]
        grid = np.full(self.shape[0] * self.shape[1], np.nan)
        grid[flat] = np.asarray(rows, dtype=float)
        return grid.reshape(self.shape)


class Pipeline:
    """Stage runner over one dataset directory and one output directory."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.out = Path(config.out_dir)
        self._bundle: PanelBundle | None = None
        self._choice: dict[str, ChoiceModelEstimates] = {}
        self._probs: dict[tuple[str, str], np.ndarray] = {}
        self._grids: dict[tuple, np.ndarray] = {}
        self._canonical: np.ndarray | None = None
        self._written: dict[str, Path] = {}
        self._notes: list[str] = []

    # ---------------- shared intermediates ----------------

    @property
    def bundle(self) -> PanelBundle:
        if self._bundle is None:
            if not self.config.data_dir:
                raise ValueError("no data directory configured; set data_dir or pass --data")
            self._bundle = load_panels(self.config.data_dir)
        return self._bundle

    def choice_estimates(self, tax_field: str | None = None) -> ChoiceModelEstimates:
        tf = tax_field or self.config.tax_field
        if tf not in self._choice:
            records = build_log_odds(self.bundle, tf, self.config.firm_fields)
            spec = FeSpec(fe=self.config.choice_fe, cluster=self.config.choice_cluster)
            self._choice[tf] = estimate_log_odds(records, self.bundle.geo, spec)
        return self._choice[tf]

    def probabilities(self, tax_field: str | None = None) -> np.ndarray:
        tf = tax_field or self.config.tax_field
        key = (tf, self.config.impute_rule)
        if key not in self._probs:
            self._probs[key] = predict_migration_probabilities(
                self.choice_estimates(tf),
                self.bundle.policies,
                self.bundle.geo,
                self.bundle.flows.years,
                impute_rule=self.config.impute_rule,
            )
        return self._probs[key]

    def canonical_shares(self) -> np.ndarray:
        """Early-window shares with invalid origin rows zeroed, so the
        same matrix serves instrument construction and counterfactuals."""
        if self._canonical is None:
            if self.config.share_window is None:
                raise ValueError("canonical instrument requires share_window in the config")
            shares, valid = initial_shares(self.bundle.flows, self.config.share_window)
            shares = np.where(valid[:, None], shares, 0.0)
            self._canonical = shares
        return self._canonical

    def instrument_grid(self, variant: str, tax_field: str | None = None) -> np.ndarray:
        tf = tax_field or self.config.tax_field
        key = (variant,) if variant == "canonical" else (variant, tf, self.config.impute_rule)
        if key not in self._grids:
            flows, geo = self.bundle.flows, self.bundle.geo
            if variant == "canonical":
                col = build_bartik(self.canonical_shares(), flows.stocks, geo, variant="canonical")
            else:
                col = build_bartik(self.probabilities(tf), flows.stocks, geo, variant=variant)
            self._grids[key] = col.values
        return self._grids[key]

    # ---------------- destination design and fits ----------------

    def destination_design(self, cfg: RunConfig | None = None) -> DestinationDesign:
        cfg = cfg or self.config
        b = self.bundle
        Z, T = b.flows.n_zones, b.flows.n_years
        y_grid = transform_outcome(b.outcomes.scope(cfg.outcome_scope), cfg.outcome_transform)

        cols, names = [], []
        tax_term = None
        if not cfg.state_year_fe:
            tax_term = _level_key(cfg.tax_field)
            cols.append(b.zone_policy(cfg.tax_field, log=True).reshape(-1))
            names.append(tax_term)
        for name in cfg.controls:
            if name not in b.outcomes.controls:
                have = sorted(b.outcomes.controls)
                raise ValueError(f"unknown control column {name!r}; dataset has {have}")
            cols.append(b.outcomes.controls[name].reshape(-1))
        names.extend(cfg.controls)
        exog_full = np.column_stack(cols) if cols else np.empty((Z * T, 0))

        kept = np.isfinite(y_grid.reshape(-1))
        if exog_full.shape[1]:
            kept &= np.isfinite(exog_full).all(axis=1)
        if not kept.any():
            raise ValueError("no usable rows: every outcome cell is missing")

        zone_f = np.repeat(np.arange(Z), T)
        year_f = np.tile(np.arange(T), Z)
        if cfg.state_year_fe:
            # plain year effects live inside the state-by-year span
            factors_full = [zone_f, b.geo.state_codes[zone_f] * T + year_f]
        else:
            factors_full = [zone_f, year_f]

        return DestinationDesign(
            y=y_grid.reshape(-1)[kept],
            endog=b.flows.inflows.reshape(-1)[kept][:, None],
            exog=exog_full[kept],
            exog_names=tuple(names),
            fe=[f[kept] for f in factors_full],
            cluster=[zone_f[kept]],
            zone_rows=zone_f[kept],
            year_rows=year_f[kept],
            kept=kept,
            y_grid=y_grid,
            factors_full=factors_full,
            exog_full=exog_full,
            tax_term=tax_term,
            shape=(Z, T),
        )

    def fit_destination(
        self, cfg: RunConfig | None = None, diagnostics: bool = True
    ) -> tuple[IvEstimates, DestinationDesign]:
        cfg = cfg or self.config
        design = self.destination_design(cfg)
        z_cols = np.column_stack(
            [self.instrument_grid(v, cfg.tax_field).reshape(-1)[design.kept] for v in cfg.instruments]
        )
        z_names = tuple(VARIANT_NAMES[v] for v in cfg.instruments)
        est = fit_2sls(
            design.y,
            design.endog,
            z_cols,
            exog=design.exog if design.exog.shape[1] else None,
            endog_names=("M",),
            instrument_names=z_names,
            exog_names=design.exog_names or None,
            fe=design.fe,
            cluster=design.cluster,
            diagnostics=diagnostics,
        )
        return est, design

    # ---------------- artifact helpers ----------------

    def _emit_csv(self, name: str, df: pd.DataFrame):
        path = self.out / name
        df.to_csv(path, index=False)
        self._written[name] = path

    def _emit_json(self, name: str, payload):
        path = self.out / name
        path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")
        self._written[name] = path

    def _input_digests(self) -> dict[str, str]:
        if not self.config.data_dir:
            return {}
        root = Path(self.config.data_dir)
        out = {}
        for name in DATA_FILES:
            path = root / name
            if path.exists():
                out[name] = _sha256(path)
        return out

    def _finish(self, command: str) -> Path:
        record = {
            "config": self.config.to_dict(),
            "inputs": self._input_digests(),
            "outputs": {name: _sha256(path) for name, path in sorted(self._written.items())},
            "notes": list(self._notes),
            "switches": {
                "numba_available": _accel.HAS_NUMBA,
                "numba_enabled": _accel.USE_NUMBA,
                "seed": self.config.seed,
                "threads": self.config.threads,
            },
        }
        manifest_path = self.out / "manifest.json"
        manifest = {"commands": {}}
        if manifest_path.exists():
            manifest = json.loads(manifest_path.read_text())
            manifest.setdefault("commands", {})
        manifest["commands"][command] = record
        manifest_path.write_text(json.dumps(_jsonable(manifest), indent=2, sort_keys=True) + "\n")
        return manifest_path

    def run(self, command: str, grid: SpecGrid | None = None) -> Path:
        """Run one stage by subcommand name; returns the manifest path."""
        handler = getattr(self, "_stage_" + command.replace("-", "_"), None)
        if handler is None:
            raise ValueError(f"unknown stage {command!r}")
        self.out.mkdir(parents=True, exist_ok=True)
        self._written = {}
        self._notes = []
        try:
            if command == "spec-curve":
                handler(grid)
            else:
                handler()
        except Exception as err:
            for path in self._written.values():
                path.unlink(missing_ok=True)
            raise StageError(command, err) from err
        return self._finish(command)

    # ---------------- stages ----------------

    def _stage_simulate(self):
        cfg = self.config
        sim = SimConfig(
            n_zones=cfg.sim_zones,
            n_states=cfg.sim_states,
            n_years=cfg.sim_years,
            stock_init=cfg.sim_stock,
            flow_mode=cfg.sim_flow_mode,
            share_exogeneity_satisfied=cfg.sim_share_exogeneity,
            endogenous_flows=cfg.sim_endogenous_flows,
            seed=cfg.seed,
        )
        world = simulate_world(sim)
        for path in write_panels(world.bundle, self.out):
            self._written[path.name] = path
        self._written["truth.json"] = write_truth(world.truth_record(), self.out / "truth.json")
        self._notes.append(
            f"simulated {cfg.sim_zones} zones in {cfg.sim_states} states over {cfg.sim_years} years"
        )

    def _stage_ingest(self):
        b = self.bundle
        mig = b.flows.migrations
        off = ~np.eye(b.flows.n_zones, dtype=bool)
        report = {
            "zones": int(b.flows.n_zones),
            "states": int(b.geo.states.size),
            "years": [int(b.flows.years[0]), int(b.flows.years[-1])],
            "flow_cells_positive": int((mig[off] > 0).sum()),
            "stay_cells_positive": int((b.flows.stays > 0).sum()),
            "scopes": sorted(b.outcomes.scopes),
            "controls": sorted(b.outcomes.controls),
            "outcome_missing": {
                scope: int((~np.isfinite(values)).sum()) for scope, values in sorted(b.outcomes.scopes.items())
            },
            "log_odds_records": len(build_log_odds(b, self.config.tax_field, self.config.firm_fields)),
        }
        self._emit_json("ingest_report.json", report)

    def _stage_choice_fit(self):
        cfg = self.config
        est = self.choice_estimates()
        cluster_spec = "+".join(cfg.choice_cluster) if cfg.choice_cluster else "hc1"
        ses = est.se
        rows = [
            {"term": term, "estimate": value, "se": ses[term], "cluster_spec": cluster_spec}
            for term, value in est.beta.items()
        ]
        self._emit_csv("estimates.csv", pd.DataFrame(rows))
        self._emit_json(
            "choice_model.json",
            {
                "intercept": est.intercept,
                "nobs": est.nobs,
                "r2_total": est.r2_total,
                "r2_within": est.r2_within,
                "sweeps": est.sweeps,
                "fe": list(cfg.choice_fe),
                "cluster": list(cfg.choice_cluster),
                "df_t": est.vce.df_t,
                "eta": est.eta,
                "eta_prime": est.eta_prime,
            },
        )

    def _stage_build_iv(self):
        cfg = self.config
        b = self.bundle
        Z, T = b.flows.n_zones, b.flows.n_years
        p = self.probabilities()
        self._emit_csv(
            "probabilities.csv",
            pd.DataFrame(
                {
                    "origin": np.repeat(b.geo.zone_ids, Z * T),
                    "dest": np.tile(np.repeat(b.geo.zone_ids, T), Z),
                    "year": np.tile(b.flows.years, Z * Z),
                    "p_hat": p.reshape(-1),
                }
            ),
        )
        frames = []
        for variant in cfg.instruments:
            grid = self.instrument_grid(variant)
            frames.append(
                pd.DataFrame(
                    {
                        "zone": np.repeat(b.geo.zone_ids, T),
                        "year": np.tile(b.flows.years, Z),
                        "variant": VARIANT_NAMES[variant],
                        "value": grid.reshape(-1),
                    }
                )
            )
        self._emit_csv("instruments.csv", pd.concat(frames, ignore_index=True))

    def _fit_rows(self, est: IvEstimates, spec_id: str, stat_type: str) -> list[dict]:
        ses = est.se
        return [
            {"spec_id": spec_id, "term": term, "estimate": value, "se": ses[term], "stat_type": stat_type}
            for term, value in est.params.items()
        ]

    def _stage_fit(self):
        est, design = self.fit_destination()
        ols = fit_fe_ols(
            design.y,
            np.column_stack([design.endog, design.exog]),
            names=("M",) + design.exog_names,
            fe=design.fe,
            cluster=design.cluster,
        )
        rows = self._fit_rows(est, "baseline", "2sls") + self._fit_rows(ols, "baseline", "ols")
        self._emit_csv("fit_results.csv", pd.DataFrame(rows))

        diag_rows = [
            {"spec_id": "baseline", "name": "nobs", "value": float(est.nobs)},
            {"spec_id": "baseline", "name": "n_singletons_dropped", "value": float(est.n_singletons_dropped)},
            {"spec_id": "baseline", "name": "r2_within", "value": est.r2_within},
            {"spec_id": "baseline", "name": "df_t", "value": float(est.vce.df_t)},
            {"spec_id": "baseline", "name": "n_clusters_zone", "value": float(est.vce.n_clusters[0])},
        ]
        f = est.diagnostics.get("effective_f")
        if f is not None:
            diag_rows.append({"spec_id": "baseline", "name": "effective_f", "value": f.statistic})
            diag_rows.append({"spec_id": "baseline", "name": "effective_f_w_trace", "value": f.w_trace})
            for tau, crit in sorted(f.critical_values.items()):
                diag_rows.append(
                    {"spec_id": "baseline", "name": f"effective_f_crit_tau{int(round(tau * 100)):02d}", "value": crit}
                )
        sw = est.diagnostics.get("sanderson_windmeijer")
        if sw is not None:
            for name, value in sw.weak_f.items():
                diag_rows.append({"spec_id": "baseline", "name": f"sw_weak_f_{name}", "value": value})
            for name, value in sw.underid_pvalue.items():
                diag_rows.append({"spec_id": "baseline", "name": f"sw_underid_p_{name}", "value": value})
        self._emit_csv("diagnostics.csv", pd.DataFrame(diag_rows))
        self._emit_json(
            "fit_summary.json",
            {
                "params": dict(est.params),
                "se": est.se,
                "conf_int_95": {k: list(est.conf_int(k)) for k in est.params},
                "first_stage_coef": {k: dict(v) for k, v in est.first_stage_coef.items()},
                "instruments": list(est.instrument_names),
                "tax_term": design.tax_term,
                "ols_params": dict(ols.params),
            },
        )
        if design.tax_term is None:
            self._notes.append("state-by-year effects absorb the destination tax term")

    def _stage_event_study(self):
        cfg = self.config
        b = self.bundle
        series = {v: self.instrument_grid(v) for v in cfg.instruments}
        design = build_event_design(b.flows, cfg.window, series)
        y_grid = transform_outcome(b.outcomes.scope(cfg.outcome_scope), cfg.outcome_transform)
        y_rows = design.select_grid(y_grid, b.flows.years)

        cols, names = [], []
        if not cfg.state_year_fe:
            tax = b.zone_policy(cfg.tax_field, log=True)
            cols.append(design.select_grid(tax, b.flows.years))
            names.append(_level_key(cfg.tax_field))
        for name in cfg.controls:
            cols.append(design.select_grid(b.outcomes.controls[name], b.flows.years))
            names.append(name)
        exog = np.column_stack(cols) if cols else None

        ok = np.isfinite(y_rows)
        if exog is not None:
            ok &= np.isfinite(exog).all(axis=1)
        if not ok.all():
            design = design.subset(ok)
            y_rows = y_rows[ok]
            exog = exog[ok] if exog is not None else None
            self._notes.append(f"dropped {int((~ok).sum())} event rows with missing cells")

        fit = fit_iv_event_study(design, y_rows, exog=exog, exog_names=names or None)
        self._emit_csv("event_study.csv", pd.DataFrame(fit.table(0.95)))
        self._emit_json(
            "event_study.json",
            {
                "window": list(cfg.window),
                "nobs": fit.estimates.nobs,
                "variants": list(cfg.instruments),
                "df_t": fit.estimates.vce.df_t,
            },
        )

    def _rotemberg_inputs(self) -> tuple[np.ndarray, str]:
        """Share cube and component variant for the lead instrument."""
        lead = self.config.instruments[0]
        if lead == "canonical":
            Z, T = self.bundle.flows.n_zones, self.bundle.flows.n_years
            cube = np.broadcast_to(self.canonical_shares()[:, :, None], (Z, Z, T)).copy()
            return cube, "all"
        return self.probabilities(), lead

    def _stage_diagnose(self):
        cfg = self.config
        b = self.bundle
        est, design = self.fit_destination()
        rz = Residualizer(
            design.factors_full,
            controls=design.exog_full if design.exog_full.shape[1] else None,
            mask=design.kept,
        )
        m_grid = b.flows.inflows
        shares_cube, rot_variant = self._rotemberg_inputs()

        rot = rotemberg_decompose(
            shares_cube, b.flows.stocks, b.geo, design.y_grid, m_grid, rz, variant=rot_variant
        )
        self._emit_csv(
            "rotemberg.csv",
            pd.DataFrame(
                {
                    "origin": rot.origin_ids,
                    "weight": rot.weight,
                    "phi_origin": rot.phi_origin,
                    "first_stage_f": rot.first_stage_f,
                    "share_variance": rot.share_variance,
                    "mean_stock": rot.mean_stock,
                    "phi_defined": rot.phi_defined,
                }
            ),
        )

        characteristics = {"outcome": design.y_grid}
        characteristics.update({name: b.outcomes.controls[name] for name in sorted(b.outcomes.controls)})
        balance = share_balance(self.probabilities(), characteristics, b.geo, difference=True)
        self._emit_csv("balance.csv", pd.DataFrame(balance))

        hhi = herfindahl_diagnostics(self.probabilities())
        origin_level = origin_level_transform(
            self.probabilities(),
            b.flows.stocks,
            design.y_grid,
            m_grid,
            b.geo,
            b.flows.years,
            extra_controls=design.exog_full if design.exog_full.shape[1] else None,
            mask=design.kept,
        )

        cols, ring_names = distance_ring_design(b.flows, b.geo, cfg.ring_edges)
        Z, T = design.shape
        self._emit_csv(
            "rings.csv",
            pd.DataFrame(
                {
                    "zone": np.repeat(np.repeat(b.geo.zone_ids, T), len(ring_names)),
                    "year": np.repeat(np.tile(b.flows.years, Z), len(ring_names)),
                    "ring": np.tile(ring_names, Z * T),
                    "value": cols.reshape(-1),
                }
            ),
        )
        ring_fit: dict[str, object]
        try:
            endog = cols.reshape(Z * T, -1)[design.kept]
            z_blocks = [
                ring_columns(self.instrument_grid(v), b.geo, cfg.ring_edges).reshape(Z * T, -1)[design.kept]
                for v in cfg.instruments
            ]
            rfit = fit_2sls(
                design.y,
                endog,
                np.column_stack(z_blocks),
                exog=design.exog if design.exog.shape[1] else None,
                endog_names=ring_names,
                exog_names=design.exog_names or None,
                fe=design.fe,
                cluster=design.cluster,
            )
            ring_fit = {"params": dict(rfit.params), "se": rfit.se}
            sw = rfit.diagnostics.get("sanderson_windmeijer")
            if sw is not None:
                ring_fit["sw_weak_f"] = dict(sw.weak_f)
        except (EstimationError, np.linalg.LinAlgError) as err:
            ring_fit = {"error": f"{type(err).__name__}: {err}"}
            self._notes.append("ring regression failed; see diagnose.json")

        payload = {
            "rotemberg": {
                "variant": cfg.instruments[0],
                "phi_full": rot.phi_full,
                "weight_sum": rot.weight_sum,
                "weighted_phi": rot.weighted_phi,
                "negative_weight_sum": rot.negative_weight_sum,
                "positive_weight_sum": rot.positive_weight_sum,
                "top": rot.top(5),
            },
            "herfindahl": {
                "hhi_origin_year": hhi.hhi_origin_year,
                "effective_size_origin_year": hhi.effective_size_origin_year,
                "largest_weight_origin_year": hhi.largest_weight_origin_year,
                "hhi_origin": hhi.hhi_origin,
                "effective_size_origin": hhi.effective_size_origin,
                "largest_weight_origin": hhi.largest_weight_origin,
            },
            "origin_level": {
                "phi_origin_level": origin_level.phi_origin_level,
                "se_origin_level": origin_level.se_origin_level,
                "phi_destination_level": origin_level.phi_destination_level,
                "n_dropped_rows": origin_level.n_dropped_rows,
            },
            "ring_fit": ring_fit,
            "fit": {"params": dict(est.params), "nobs": est.nobs},
        }
        self._emit_json("diagnose.json", payload)

    def _stage_placebo(self):
        cfg = self.config
        b = self.bundle
        design = self.destination_design()
        if not np.isfinite(design.y_grid).all():
            raise ValueError("placebo stage needs a complete outcome panel; found missing cells")
        result = permutation_placebo(
            design.y_grid,
            b.flows.inflows,
            self.instrument_grid(cfg.instruments[0]),
            b.geo,
            n_draws=cfg.placebo_draws,
            seed=cfg.seed,
            controls=design.exog_full if design.exog_full.shape[1] else None,
        )
        self._emit_csv("placebo.csv", pd.DataFrame(result.rows()))
        self._emit_json(
            "placebo.json",
            {
                "baseline": result.baseline,
                "mean": result.mean,
                "sd": result.sd,
                "ci_low": result.ci_low,
                "ci_high": result.ci_high,
                "rejection_rate": result.rejection_rate,
                "n_draws": result.n_draws,
                "excluded_zones": list(result.excluded_zones),
            },
        )
        if result.excluded_zones:
            self._notes.append(f"excluded {len(result.excluded_zones)} zones without same-state alternatives")

    def _stage_counterfactual(self):
        cfg = self.config
        if cfg.outcome_transform != "log1p":
            raise ValueError("counterfactual stage requires the log1p outcome transform")
        b = self.bundle
        est_all, design = self.fit_destination(cfg.replace(outcome_scope="y_all"))
        est_ext, _ = self.fit_destination(cfg.replace(outcome_scope="y_external"), diagnostics=False)
        phi_all = est_all.params["M"]
        phi_ext = est_ext.params["M"]
        xi = est_all.params[design.tax_term] if design.tax_term else 0.0
        if design.tax_term is None:
            self._notes.append("tax term absorbed by state-by-year effects; direct channel set to zero")

        m_hat = design.to_grid(est_all.first_stage_fitted["M"], est_all.keep_mask)
        fitted_lny = design.to_grid(est_all.fitted, est_all.keep_mask)

        policies_cf = equalize_taxes(b.policies, cfg.counterfactual_fields)
        flowcf = counterfactual_flows(
            self.choice_estimates(),
            b.policies,
            policies_cf,
            b.flows,
            b.geo,
            est_all.first_stage_coef["M"],
            m_hat,
            variants=cfg.instruments,
            tax_field=cfg.tax_field,
            tax_term=design.tax_term,
            impute_rule=cfg.impute_rule,
            canonical_shares=self.canonical_shares() if "canonical" in cfg.instruments else None,
        )
        delta_m = np.where(np.isfinite(m_hat), flowcf.delta_m, np.nan)
        y_obs = b.outcomes.scope("y_all")
        report = counterfactual_productivity(phi_all, phi_ext, xi, delta_m, flowcf.dtax, y_obs, fitted_lny)

        Z, T = design.shape
        self._emit_csv(
            "counterfactual.csv",
            pd.DataFrame(
                {
                    "zone": np.repeat(b.geo.zone_ids, T),
                    "year": np.tile(b.flows.years, Z),
                    "delta_m": delta_m.reshape(-1),
                    "delta_lny": report.delta_lny.reshape(-1),
                    "direct": report.direct.reshape(-1),
                    "indirect_internal": report.indirect_internal.reshape(-1),
                    "indirect_external": report.indirect_external.reshape(-1),
                }
            ),
        )
        self._emit_csv("states.csv", pd.DataFrame(aggregate_to_state(report, y_obs, b.geo)))
        self._emit_json(
            "counterfactual.json",
            {
                "national": national_decomposition(report, y_obs),
                "phi_all": phi_all,
                "phi_external": phi_ext,
                "xi": xi,
                "equalized_fields": list(cfg.counterfactual_fields),
                "n_guarded_flows": flowcf.n_guarded,
                "n_guarded_outcomes": int(report.guarded.sum()),
                "internal_negative": report.internal_negative,
            },
        )

    def _stage_spec_curve(self, grid: SpecGrid | None):
        cfg = self.config
        if grid is None:
            raise ValueError("spec-curve needs a [grid] section in the config")
        cells = list(grid.cells())

        # warm the shared caches serially; cells then run estimation only
        tax_fields = sorted({over.get("tax_field", cfg.tax_field) for _, over in cells})
        variant_sets = {over.get("instruments", cfg.instruments) for _, over in cells}
        for tf in tax_fields:
            self.probabilities(tf)
            for variants in variant_sets:
                for v in variants:
                    self.instrument_grid(v, tf)

        def run_cell(spec_id: int, over: dict) -> dict:
            c2 = cfg.replace(**over)
            row = {
                "spec_id": spec_id,
                "tax_field": c2.tax_field,
                "outcome_transform": c2.outcome_transform,
                "instruments": "+".join(c2.instruments),
                "state_year_fe": c2.state_year_fe,
                "controls": "+".join(c2.controls),
                "outcome_scope": c2.outcome_scope,
            }
            est, _ = self.fit_destination(c2)
            lo, hi = est.conf_int("M")
            f = est.diagnostics.get("effective_f")
            row.update(
                estimate=est.params["M"],
                se=est.se["M"],
                ci_low=lo,
                ci_high=hi,
                effective_f=f.statistic if f is not None else np.nan,
                weak_iv_pass=bool(f is not None and f.passes(cfg.filter_tau)),
            )
            return row

        results: dict[int, dict] = {}
        failures: dict[int, str] = {}
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            futures = {pool.submit(run_cell, sid, over): sid for sid, over in cells}
            for future in futures:
                sid = futures[future]
                try:
                    results[sid] = future.result()
                except Exception as err:  # noqa: BLE001 - cell failures are data, not fatal
                    failures[sid] = f"{type(err).__name__}: {err}"

        rows = [results[sid] for sid in sorted(results)]
        self._emit_csv("spec_cells.csv", pd.DataFrame(rows))
        retained = [r for r in rows if r["weak_iv_pass"]]
        retained.sort(key=lambda r: (r["estimate"], r["spec_id"]))
        # keep the header even when every cell is filtered out
        curve = pd.DataFrame(retained, columns=list(rows[0]) if rows else None)
        curve.insert(0, "rank", np.arange(1, len(retained) + 1))
        self._emit_csv("spec_curve.csv", curve)
        self._emit_json(
            "spec_curve.json",
            {
                "cells": len(cells),
                "estimated": len(rows),
                "retained": len(retained),
                "filtered_weak": len(rows) - len(retained),
                "failed": len(failures),
                "filter_tau": cfg.filter_tau,
                "failures": {str(k): v for k, v in sorted(failures.items())},
            },
        )
        if failures:
            self._notes.append(f"{len(failures)} grid cells failed to estimate")
