"""Tax-equalization counterfactuals.

Holds every estimate fixed, replaces state taxes with their cross-state
mean, pushes the change through predicted probabilities, rebuilt Bartik
columns, and the fitted first stage, then decomposes the implied
outcome changes into a direct tax effect and indirect flow effects
split into internal and external knowledge channels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .choice import ChoiceModelEstimates, predict_migration_probabilities
from .geo import GeoRegistry
from .instruments import build_bartik
from .panels import PolicyPanel

__all__ = [
    "equalize_taxes",
    "FlowCounterfactual",
    "counterfactual_flows",
    "CounterfactualReport",
    "counterfactual_productivity",
    "aggregate_to_state",
    "national_decomposition",
]

FITTED_FLOOR = 1e-6


def equalize_taxes(
    policies: PolicyPanel,
    fields: str | Sequence[str],
    years: Sequence[int] | None = None,
) -> PolicyPanel:
    """Set each listed field to its unweighted cross-state mean per year.

    Other fields and out-of-scope years are returned unchanged.
    """
    if isinstance(fields, str):
        fields = (fields,)
    if years is None:
        year_mask = np.ones(policies.years.size, dtype=bool)
    else:
        wanted = set(int(y) for y in years)
        year_mask = np.array([int(y) in wanted for y in policies.years])
        missing = wanted - set(int(y) for y in policies.years)
        if missing:
            raise ValueError(f"years not covered by the policy panel: {sorted(missing)}")
    replacements = {}
    for f in fields:
        grid = policies.values(f).copy()
        grid[:, year_mask] = grid[:, year_mask].mean(axis=0, keepdims=True)
        replacements[f] = grid
    return policies.replace(**replacements)


@dataclass(frozen=True)
class FlowCounterfactual:
    m_hat: np.ndarray  # (zone, year) fitted inflows, baseline
    m_tilde: np.ndarray  # counterfactual fitted inflows
    delta_m: np.ndarray  # inferred change in observed inflows
    dtax: np.ndarray  # counterfactual change in ln(1 - tax) at the destination
    guarded: np.ndarray  # cells where the ratio form was replaced
    instruments_base: Mapping[str, np.ndarray]
    instruments_cf: Mapping[str, np.ndarray]
    probabilities_cf: np.ndarray

    @property
    def n_guarded(self) -> int:
        return int(self.guarded.sum())


def counterfactual_flows(
    est: ChoiceModelEstimates,
    policies_base: PolicyPanel,
    policies_cf: PolicyPanel,
    flows,
    geo: GeoRegistry,
    first_stage_coef: Mapping[str, float],
    m_hat: np.ndarray,
    variants: Sequence[str] = ("all",),
    tax_field: str = "atr95",
    tax_term: str | None = None,
    impute_rule: str = "zero_mean",
    canonical_shares: np.ndarray | None = None,
) -> FlowCounterfactual:
    """Fitted-first-stage counterfactual inflows under new taxes.

    Both probability sets are produced by the same prediction path, so
    a counterfactual equal to the baseline yields exact zeros.  Stocks
    stay at their baseline values; only shares and the destination tax
    term move.  Cells with fitted inflow at or below the floor switch
    from the ratio form to the level difference against the observed
    flow and are flagged in ``guarded``.
    """
    years = flows.years
    p_base = predict_migration_probabilities(est, policies_base, geo, years, impute_rule=impute_rule)
    p_cf = predict_migration_probabilities(est, policies_cf, geo, years, impute_rule=impute_rule)

    m_hat = np.asarray(m_hat, dtype=float)
    m_obs = flows.inflows
    shift = np.zeros_like(m_hat)
    base_cols, cf_cols = {}, {}
    for variant in variants:
        if variant == "canonical":
            if canonical_shares is None:
                raise ValueError("canonical variant requires the initial-share matrix")
            shares_pair = (canonical_shares, canonical_shares)
        else:
            shares_pair = (p_base, p_cf)
        col_b = build_bartik(shares_pair[0], flows.stocks, geo, variant=variant)
        col_c = build_bartik(shares_pair[1], flows.stocks, geo, variant=variant)
        base_cols[variant] = col_b.values
        cf_cols[variant] = col_c.values
        psi = first_stage_coef.get(col_b.name)
        if psi is None:
            raise ValueError(f"first stage has no coefficient for instrument {col_b.name!r}")
        shift = shift + psi * (col_c.values - col_b.values)

    dtax_state = policies_cf.log_level(tax_field) - policies_base.log_level(tax_field)
    zone_state = np.array([policies_base.state_index(geo.state_of(z)) for z in geo.zone_ids])
    year_cols = np.array([policies_base.year_index(int(t)) for t in years])
    dtax = dtax_state[np.ix_(zone_state, year_cols)]
    if tax_term is not None:
        xi_f = first_stage_coef.get(tax_term)
        if xi_f is None:
            raise ValueError(f"first stage has no coefficient for tax term {tax_term!r}")
        shift = shift + xi_f * dtax

    m_tilde = m_hat + shift
    raw = m_tilde - m_hat
    guarded = (m_hat <= FITTED_FLOOR) & (raw != 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(m_hat > FITTED_FLOOR, raw / np.where(m_hat > FITTED_FLOOR, m_hat, 1.0), 0.0)
    delta_m = np.where(raw == 0.0, 0.0, np.where(guarded, m_tilde - m_obs, ratio * m_obs))
    return FlowCounterfactual(
        m_hat=m_hat,
        m_tilde=m_tilde,
        delta_m=delta_m,
        dtax=dtax,
        guarded=guarded,
        instruments_base=base_cols,
        instruments_cf=cf_cols,
        probabilities_cf=p_cf,
    )


@dataclass(frozen=True)
class CounterfactualReport:
    delta_lny: np.ndarray  # (zone, year) log-point outcome change
    direct: np.ndarray
    indirect_internal: np.ndarray
    indirect_external: np.ndarray
    delta_y: np.ndarray  # outcome-level change scaled to observed outcomes
    y_hat: np.ndarray
    y_tilde: np.ndarray
    guarded: np.ndarray
    internal_negative: bool  # phi_all < phi_ext, internal channel flips sign


def counterfactual_productivity(
    phi_all: float,
    phi_ext: float,
    xi: float,
    delta_m: np.ndarray,
    dtax: np.ndarray,
    y_obs: np.ndarray,
    fitted_lny: np.ndarray,
) -> CounterfactualReport:
    """Decomposed outcome changes from a flow counterfactual.

    The total log change is assembled as the sum of its three
    components, so additivity is exact by construction.  Level changes
    exponentiate the fitted log(1 + outcome) values; cells with fitted
    level at or below the floor fall back to the level difference.
    """
    delta_m = np.asarray(delta_m, dtype=float)
    dtax = np.asarray(dtax, dtype=float)
    y_obs = np.asarray(y_obs, dtype=float)
    fitted_lny = np.asarray(fitted_lny, dtype=float)

    direct = xi * dtax
    indirect_external = phi_ext * delta_m
    indirect_internal = (phi_all - phi_ext) * delta_m
    delta_lny = direct + indirect_internal + indirect_external

    y_hat = np.clip(np.expm1(fitted_lny), 0.0, None)
    y_tilde = np.clip(np.expm1(fitted_lny + delta_lny), 0.0, None)
    raw = y_tilde - y_hat
    guarded = (y_hat <= FITTED_FLOOR) & (raw != 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(y_hat > FITTED_FLOOR, raw / np.where(y_hat > FITTED_FLOOR, y_hat, 1.0), 0.0)
    delta_y = np.where(raw == 0.0, 0.0, np.where(guarded, y_tilde - y_obs, ratio * y_obs))
    return CounterfactualReport(
        delta_lny=delta_lny,
        direct=direct,
        indirect_internal=indirect_internal,
        indirect_external=indirect_external,
        delta_y=delta_y,
        y_hat=y_hat,
        y_tilde=y_tilde,
        guarded=guarded,
        internal_negative=bool(phi_all < phi_ext),
    )


def aggregate_to_state(
    report: CounterfactualReport,
    y_obs: np.ndarray,
    geo: GeoRegistry,
) -> list[dict]:
    """Outcome-weighted state aggregates of the zone-level changes.

    The state percentage change divides the summed level changes by the
    summed observed outcomes; component columns carry outcome-weighted
    averages of the log-point pieces.  Cells with missing outcomes drop
    out of every sum.
    """
    y_obs = np.asarray(y_obs, dtype=float)
    ok = np.isfinite(y_obs) & np.isfinite(report.delta_y)
    rows = []
    for s, state in enumerate(geo.states):
        in_state = (geo.state_codes == s)[:, None] & ok
        y_total = y_obs[in_state].sum()
        row = {"state": state, "y_total": float(y_total)}
        if y_total <= 0:
            row.update(pct_change=np.nan, direct=np.nan, indirect_internal=np.nan, indirect_external=np.nan, flagged=True)
        else:
            row["pct_change"] = float(report.delta_y[in_state].sum() / y_total)
            for name in ("direct", "indirect_internal", "indirect_external"):
                comp = getattr(report, name)
                row[name] = float((comp[in_state] * y_obs[in_state]).sum() / y_total)
            row["flagged"] = False
        rows.append(row)
    return rows


def national_decomposition(report: CounterfactualReport, y_obs: np.ndarray) -> dict:
    """Outcome-weighted national totals of the log-point components with
    signed shares (summing to 1 when the total is nonzero) and
    magnitude shares based on absolute contributions."""
    y_obs = np.asarray(y_obs, dtype=float)
    ok = np.isfinite(y_obs) & np.isfinite(report.delta_lny)
    totals = {
        name: float((getattr(report, name)[ok] * y_obs[ok]).sum())
        for name in ("direct", "indirect_internal", "indirect_external")
    }
    total = sum(totals.values())
    out = {"total": total, **{f"{k}_level": v for k, v in totals.items()}}
    if total != 0.0:
        for k, v in totals.items():
            out[f"{k}_share"] = v / total
        out["indirect_share"] = (totals["indirect_internal"] + totals["indirect_external"]) / total
    abs_total = sum(abs(v) for v in totals.values())
    if abs_total > 0:
        for k, v in totals.items():
            out[f"{k}_abs_share"] = abs(v) / abs_total
    return out
