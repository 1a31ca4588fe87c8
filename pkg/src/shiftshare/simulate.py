"""Structural world simulator with recorded ground truth.

Workers pick locations from a logit over after-tax income, amenities,
and bilateral costs; firms' wage response is eliminated by equating the
two sides' choice odds, so equilibrium choice probabilities are a
softmax of reduced-form indices and the log odds of moving versus
staying are exactly linear in policy gaps and layered effects.  Flows
are multinomial draws from those probabilities, stocks accumulate the
realized moves, and outcomes load on realized inflows with a known
semi-elasticity.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from .geo import GeoRegistry
from .panels import (
    BINARY_FIELDS,
    CREDIT_FIELDS,
    FlowPanel,
    OutcomePanel,
    PanelBundle,
    PolicyPanel,
    RATE_FIELDS,
)
from .seeding import derive_rng

__all__ = ["SimConfig", "WorldTruth", "SimulatedWorld", "structural_to_reduced", "simulate_world", "FIRM_FIELDS"]

FIRM_FIELDS = ("citr", "itc", "rtc")

_RATE_BOUNDS = {
    "atr95": (0.05, 0.45),
    "atr99": (0.05, 0.45),
    "atr50": (0.03, 0.30),
    "mtr": (0.05, 0.45),
    "aptr": (0.05, 0.45),
    "citr": (0.0, 0.12),
}
_CREDIT_BOUNDS = {"itc": (0.0, 0.10), "rtc": (0.0, 0.25)}


def structural_to_reduced(alpha: float, beta) -> tuple[float, np.ndarray]:
    """Map structural preference and profit coefficients to the
    reduced-form log-odds coefficients: eta = a/(1+a), eta' = a*b/(1+a)
    per firm policy component."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    beta = np.broadcast_to(np.asarray(beta, dtype=float), (len(FIRM_FIELDS),)).copy()
    eta = alpha / (1.0 + alpha)
    return eta, alpha * beta / (1.0 + alpha)


@dataclass(frozen=True)
class SimConfig:
    n_zones: int = 30
    n_states: int = 6
    n_years: int = 20
    year0: int = 1990
    stock_init: int = 200
    tax_step: float = 0.02
    flow_mode: str = "multinomial"  # or "gumbel" for the per-unit draw
    share_exogeneity_satisfied: bool = True
    endogenous_flows: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.n_zones < self.n_states or self.n_states < 2:
            raise ValueError("need at least two states and one zone per state")
        if self.flow_mode not in {"multinomial", "gumbel"}:
            raise ValueError(f"unknown flow mode {self.flow_mode!r}")


@dataclass(frozen=True)
class WorldTruth:
    """Structural parameters; everything downstream is derived."""

    alpha: float = 1.5
    beta: float | np.ndarray = 1.0
    amenity: np.ndarray = field(default_factory=lambda: np.zeros(0))
    amenity_firm: np.ndarray = field(default_factory=lambda: np.zeros(0))
    cost: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    cost_firm: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    phi: float = 0.06
    phi_external: float = 0.04
    xi: float = 1.5
    fe_zone: np.ndarray = field(default_factory=lambda: np.zeros(0))
    fe_year: np.ndarray = field(default_factory=lambda: np.zeros(0))
    noise_sd: float = 0.10
    logodds_noise_sd: float = 0.0
    endog_strength: float = 5.0
    exo_violation_scale: float = 1.0
    phi_ts: float = 0.0
    phi_ts_interaction: float = 0.0

    @property
    def eta(self) -> float:
        return structural_to_reduced(self.alpha, self.beta)[0]

    @property
    def eta_prime(self) -> np.ndarray:
        return structural_to_reduced(self.alpha, self.beta)[1]

    @staticmethod
    def random(config: SimConfig, rng: np.random.Generator, **overrides) -> "WorldTruth":
        """Draw amenities, costs, and outcome effects at sensible scales.

        Bilateral costs rise with a latent distance proxy and keep the
        yearly stay probability high, mirroring rare migration.
        """
        z = config.n_zones
        amenity = rng.normal(0.0, 0.3, size=z)
        amenity_firm = rng.normal(0.0, 0.3, size=z)
        base = 4.5 + rng.normal(0.0, 0.25, size=(z, z))
        cost = np.clip(base + rng.uniform(0.0, 0.8, size=(z, z)), 0.5, None)
        cost_firm = np.clip(base + rng.uniform(0.0, 0.8, size=(z, z)), 0.5, None)
        np.fill_diagonal(cost, 0.0)
        np.fill_diagonal(cost_firm, 0.0)
        fe_zone = rng.normal(3.0, 0.4, size=z)
        fe_year = rng.normal(0.0, 0.15, size=config.n_years)
        truth = WorldTruth(
            amenity=amenity,
            amenity_firm=amenity_firm,
            cost=cost,
            cost_firm=cost_firm,
            fe_zone=fe_zone,
            fe_year=fe_year,
        )
        return replace(truth, **overrides) if overrides else truth


@dataclass(frozen=True)
class SimulatedWorld:
    bundle: PanelBundle
    truth: WorldTruth
    probabilities: np.ndarray  # (Z, Z, T) equilibrium choice probabilities
    wages: np.ndarray  # (Z, T) zone component of the equilibrium log wage
    epsilon: np.ndarray  # (Z, T) outcome disturbances as realized
    indices: np.ndarray  # (Z, Z, T) choice indices behind the softmax

    def truth_record(self) -> dict:
        """JSON-ready summary of the generating parameters."""
        t = self.truth
        eta, eta_prime = structural_to_reduced(t.alpha, t.beta)
        return {
            "alpha": t.alpha,
            "beta": np.broadcast_to(np.asarray(t.beta, float), (len(FIRM_FIELDS),)).tolist(),
            "eta": eta,
            "eta_prime": dict(zip(FIRM_FIELDS, eta_prime.tolist())),
            "phi": t.phi,
            "phi_external": t.phi_external,
            "xi": t.xi,
            "noise_sd": t.noise_sd,
            "logodds_noise_sd": t.logodds_noise_sd,
            "phi_ts": t.phi_ts,
            "phi_ts_interaction": t.phi_ts_interaction,
            "amenity": t.amenity,
            "amenity_firm": t.amenity_firm,
            "fe_zone": t.fe_zone,
            "fe_year": t.fe_year,
            "wages": self.wages,
        }


def _reflecting_walk(rng, lo, hi, step, shape_st):
    s, t = shape_st
    x = np.empty((s, t))
    x[:, 0] = rng.uniform(lo + 0.1 * (hi - lo), hi - 0.1 * (hi - lo), size=s)
    span = hi - lo
    for k in range(1, t):
        prop = x[:, k - 1] + rng.normal(0.0, step, size=s)
        folded = np.mod(prop - lo, 2.0 * span)
        x[:, k] = lo + np.minimum(folded, 2.0 * span - folded)
    return x


def _draw_policies(config: SimConfig, rng) -> PolicyPanel:
    states = np.array([f"S{i + 1:02d}" for i in range(config.n_states)], dtype=object)
    years = np.arange(config.year0, config.year0 + config.n_years)
    shape = (config.n_states, config.n_years)
    columns = {}
    for f in RATE_FIELDS:
        lo, hi = _RATE_BOUNDS[f]
        columns[f] = _reflecting_walk(rng, lo, hi, config.tax_step, shape)
    for f in CREDIT_FIELDS:
        lo, hi = _CREDIT_BOUNDS[f]
        columns[f] = _reflecting_walk(rng, lo, hi, config.tax_step / 2.0, shape)
    horizon = config.year0 + config.n_years + 5
    for f in BINARY_FIELDS:
        adopt = rng.integers(config.year0 - 2, horizon, size=config.n_states)
        grid = (years[None, :] >= adopt[:, None]).astype(float)
        if f == "ts_low":
            grid = 1.0 - grid  # weak protection until strengthened
        columns[f] = grid
    return PolicyPanel(states, years, columns)


def _zone_grid(config: SimConfig, rng) -> GeoRegistry:
    lat = rng.uniform(30.0, 48.0, size=config.n_zones)
    lon = rng.uniform(-120.0, -75.0, size=config.n_zones)
    order = np.argsort(lon, kind="stable")
    state_of = np.empty(config.n_zones, dtype=np.int64)
    # contiguous longitude bands so states are geographically coherent
    state_of[order] = (np.arange(config.n_zones) * config.n_states) // config.n_zones
    states = np.array([f"S{i + 1:02d}" for i in state_of], dtype=object)
    return GeoRegistry(
        zone_ids=np.arange(1, config.n_zones + 1, dtype=np.int64),
        state_ids=states,
        centroids=np.column_stack([lat, lon]),
    )


def simulate_world(
    config: SimConfig,
    truth: WorldTruth | None = None,
    policies: PolicyPanel | None = None,
) -> SimulatedWorld:
    """Simulate one world; deterministic given (config, truth, seed).

    Randomness is split into named substreams (geography, policies,
    truth draws, disturbances, flows) so holding the seed fixed while
    overriding ``policies`` yields common random numbers elsewhere, the
    setup counterfactual comparisons need.
    """
    seed = config.seed
    geo = _zone_grid(config, derive_rng(seed, "geo"))
    if policies is None:
        policies = _draw_policies(config, derive_rng(seed, "policy"))
    if truth is None:
        truth = WorldTruth.random(config, derive_rng(seed, "truth"))
    if truth.amenity.shape != (config.n_zones,):
        raise ValueError("truth arrays sized for a different world")

    years = np.arange(config.year0, config.year0 + config.n_years)
    Z, T = config.n_zones, config.n_years
    state_rows = np.array([policies.state_index(s) for s in geo.state_ids])
    t0 = policies.year_index(config.year0)
    if t0 + T > policies.years.size:
        raise ValueError("policy panel too short for the simulated horizon")
    sl = slice(t0, t0 + T)

    eta, eta_prime = structural_to_reduced(truth.alpha, truth.beta)
    shared = 1.0 / (1.0 + truth.alpha)
    gamma_dest = (truth.amenity + truth.alpha * truth.amenity_firm) * shared
    gamma_pair = -(truth.cost + truth.alpha * truth.cost_firm) * shared

    ln_net_atr = policies.log_level("atr95")[state_rows][:, sl]
    firm_part = np.zeros((Z, T))
    beta_vec = np.broadcast_to(np.asarray(truth.beta, float), (len(FIRM_FIELDS),))
    for coef, f in zip(eta_prime, FIRM_FIELDS):
        firm_part += coef * policies.log_level(f)[state_rows][:, sl]
    dest_index = eta * ln_net_atr + firm_part + gamma_dest[:, None]

    rng_eps = derive_rng(seed, "disturbance")
    eps = rng_eps.normal(0.0, truth.noise_sd, size=(Z, T))
    if not config.share_exogeneity_satisfied:
        # productivity shocks load on the other states' shifters
        ln_net_by_state = policies.log_level("atr95")[:, sl]
        total = ln_net_by_state.sum(axis=0)
        others = (total[None, :] - ln_net_by_state[state_rows]) / (policies.state_ids.size - 1)
        eps = eps + truth.exo_violation_scale * (others - others.mean())

    V = dest_index[None, :, :] + gamma_pair[:, :, None]
    if truth.logodds_noise_sd > 0:
        u = rng_eps.normal(0.0, truth.logodds_noise_sd, size=(Z, Z, T))
        i = np.arange(Z)
        u[i, i, :] = 0.0
        V = V + u
    if config.endogenous_flows:
        V = V + truth.endog_strength * eps[None, :, :]

    shifted = V - V.max(axis=1, keepdims=True)
    P = np.exp(shifted)
    P /= P.sum(axis=1, keepdims=True)

    rng_flow = derive_rng(seed, "flows")
    m = np.zeros((Z, Z, T))
    stocks = np.zeros((Z, T))
    stocks[:, 0] = config.stock_init
    for t in range(T):
        counts = stocks[:, t].astype(np.int64)
        if config.flow_mode == "multinomial":
            m[:, :, t] = rng_flow.multinomial(counts, P[:, :, t])
        else:
            for o in range(Z):
                gumbel = rng_flow.gumbel(size=(counts[o], Z))
                picks = np.argmax(V[o, :, t][None, :] + gumbel, axis=1)
                m[o, :, t] = np.bincount(picks, minlength=Z)
        if t + 1 < T:
            stocks[:, t + 1] = m[:, :, t].sum(axis=0)

    i = np.arange(Z)
    inflows = m.sum(axis=0) - m[i, i, :]
    s_grid = policies.values("ts_low")[state_rows][:, sl]
    index_all = (
        truth.phi * inflows
        + truth.phi_ts * s_grid
        + truth.phi_ts_interaction * inflows * s_grid
        + truth.xi * ln_net_atr
        + truth.fe_zone[:, None]
        + truth.fe_year[None, :]
        + eps
    )
    index_ext = index_all - (truth.phi - truth.phi_external) * inflows
    y_all = np.clip(np.expm1(index_all), 0.0, None)
    y_ext = np.clip(np.expm1(index_ext), 0.0, None)
    scopes = {"y_all": y_all, "y_external": y_ext, "y_internal": y_all - y_ext}
    controls = {"log_stock": np.log1p(stocks)}

    wages = (-truth.alpha * ln_net_atr + (beta_vec[:, None, None] * np.stack(
        [policies.log_level(f)[state_rows][:, sl] for f in FIRM_FIELDS]
    )).sum(axis=0) + (truth.amenity_firm - truth.amenity)[:, None]) * shared

    bundle = PanelBundle(
        geo=geo,
        policies=policies,
        flows=FlowPanel(geo.zone_ids, years, m, stocks),
        outcomes=OutcomePanel(geo.zone_ids, years, scopes, controls),
    )
    return SimulatedWorld(
        bundle=bundle,
        truth=truth,
        probabilities=P,
        wages=wages,
        epsilon=eps,
        indices=V,
    )
