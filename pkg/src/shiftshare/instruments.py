"""Shift-share instrument construction from shares and origin stocks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .geo import GeoRegistry
from .panels import FlowPanel

__all__ = ["InstrumentColumn", "build_bartik", "initial_shares", "VARIANTS", "VARIANT_NAMES"]

VARIANTS = ("all", "interstate", "spatial_lag", "canonical")
VARIANT_NAMES = {
    "all": "B",
    "interstate": "B_interstate",
    "spatial_lag": "B_spatial",
    "canonical": "B_canonical",
}


@dataclass(frozen=True)
class InstrumentColumn:
    name: str
    variant: str
    values: np.ndarray  # (Z, T)
    provenance: Mapping[str, object] = field(default_factory=dict)


def initial_shares(flows: FlowPanel, window: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Fixed early-window migration shares for the canonical variant.

    ``P0[o, d] = sum_t M_odt / sum_t I_ot`` over the window years.
    Returns ``(P0, valid)``; origins with zero windowed stock get NaN
    rows and ``valid[o] = False``.
    """
    y0, y1 = window
    years = flows.years
    if y0 > y1 or y0 < years[0] or y1 > years[-1]:
        raise ValueError(f"window {window} outside flow years [{years[0]}, {years[-1]}]")
    sl = slice(int(y0 - years[0]), int(y1 - years[0]) + 1)
    flow_sum = flows.migrations[:, :, sl].sum(axis=2)
    stock_sum = flows.stocks[:, sl].sum(axis=1)
    valid = stock_sum > 0
    shares = np.full_like(flow_sum, np.nan)
    shares[valid] = flow_sum[valid] / stock_sum[valid, None]
    return shares, valid


def build_bartik(
    shares: np.ndarray,
    stocks: np.ndarray,
    geo: GeoRegistry,
    variant: str = "all",
    exclude_origins: np.ndarray | None = None,
    shares_tag: str = "predicted",
) -> InstrumentColumn:
    """One instrument column B[d, t] as a share-weighted sum of origin
    stocks, with the exclusion set defined by ``variant``:

    - ``all``: every origin except the destination itself;
    - ``interstate``: additionally every origin in the destination's state;
    - ``spatial_lag``: shares pointing at the destination's nearest
      neighbor, excluding the destination and that neighbor as origins;
    - ``canonical``: like ``all`` but with time-invariant (Z, Z) shares.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; known: {VARIANTS}")
    stocks = np.asarray(stocks, dtype=float)
    Z, T = stocks.shape
    want = (Z, Z) if variant == "canonical" else (Z, Z, T)
    shares = np.asarray(shares, dtype=float)
    if shares.shape != want:
        raise ValueError(f"shares shape {shares.shape} does not match {want}")

    include = np.ones(Z, dtype=bool)
    if exclude_origins is not None:
        include &= ~np.asarray(exclude_origins, dtype=bool)
    s = shares.copy()
    s[~include] = 0.0
    if np.isnan(s).any():
        raise ValueError("NaN share for an included origin")
    mass = np.abs(s).sum(axis=1)  # (Z,) or (Z, T) share mass per origin
    if variant == "canonical":
        mass = np.repeat(mass[:, None], T, axis=1)
    if ((mass > 0) & ~np.isfinite(stocks)).any():
        o, t = np.argwhere((mass > 0) & ~np.isfinite(stocks))[0]
        raise ValueError(f"missing stock for origin index {o} in year index {t} with positive share")

    w = np.where(include[:, None], np.nan_to_num(stocks), 0.0)
    d = np.arange(Z)
    if variant == "canonical":
        np.fill_diagonal(s, 0.0)
        values = s.T @ w
    elif variant == "spatial_lag":
        nu = geo.neighbor_index
        reach = np.einsum("oct,ot->ct", s, w)
        values = reach[nu, :] - s[d, nu, :] * w[d, :] - s[nu, nu, :] * w[nu, :]
    else:
        s[d, d, :] = 0.0
        if variant == "interstate":
            same_state = geo.state_codes[:, None] == geo.state_codes[None, :]
            s = np.where(same_state[:, :, None], 0.0, s)
        values = np.einsum("odt,ot->dt", s, w)

    return InstrumentColumn(
        name=VARIANT_NAMES[variant],
        variant=variant,
        values=values,
        provenance={
            "shares": shares_tag,
            "variant": variant,
            "n_origins": int(include.sum()),
        },
    )
