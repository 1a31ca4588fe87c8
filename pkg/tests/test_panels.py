"""Panel containers, validation, flow tallies, and log-odds records."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from shiftshare import (
    FlowPanel,
    GeoRegistry,
    OutcomePanel,
    PanelBundle,
    PanelValidationError,
    PolicyPanel,
    build_flow_tables,
    build_log_odds,
)
from shiftshare.panels import POLICY_FIELDS, delta_key


def make_policies(states=("A", "B"), years=(1990, 1991, 1992), **overrides):
    states = np.array(states, dtype=object)
    years = np.array(years)
    shape = (states.size, years.size)
    columns = {}
    for f in POLICY_FIELDS:
        if f in ("ts_low", "udda", "uflra", "ufta"):
            columns[f] = np.zeros(shape)
        else:
            columns[f] = np.full(shape, 0.05)
    columns.update(overrides)
    return PolicyPanel(states, years, columns)


def two_zone_geo():
    return GeoRegistry(
        zone_ids=np.array([1, 2]),
        state_ids=np.array(["A", "B"], dtype=object),
        centroids=np.array([[40.0, -100.0], [41.0, -95.0]]),
    )


def test_delta_key_by_field_type():
    assert delta_key("atr95") == "d_ln_1m_atr95"
    assert delta_key("itc") == "d_ln_1p_itc"
    with pytest.raises(ValueError, match="no log transform"):
        delta_key("udda")


def test_policy_log_levels():
    pol = make_policies(atr95=np.full((2, 3), 0.3), itc=np.full((2, 3), 0.1))
    assert_allclose(pol.log_level("atr95"), np.log(0.7))
    assert_allclose(pol.log_level("itc"), np.log(1.1))


def test_policy_panel_validation_collects_problems():
    bad = {
        "atr95": np.full((2, 3), 1.2),  # rate outside [0, 1)
        "itc": np.full((2, 3), -0.1),  # negative credit
        "udda": np.full((2, 3), 0.5),  # non-binary
    }
    with pytest.raises(PanelValidationError) as err:
        make_policies(**bad)
    text = str(err.value)
    assert "atr95 out of [0, 1)" in text
    assert "negative itc" in text
    assert "non-binary udda" in text


def test_policy_panel_rejects_missing_and_misshapen():
    with pytest.raises(PanelValidationError, match="missing policy value"):
        make_policies(mtr=np.full((2, 3), np.nan))
    with pytest.raises(PanelValidationError, match="shape"):
        make_policies(mtr=np.full((2, 2), 0.1))
    with pytest.raises(PanelValidationError, match="consecutive"):
        make_policies(years=(1990, 1992, 1993))
    with pytest.raises(PanelValidationError, match="duplicate state"):
        make_policies(states=("A", "A"))


def test_policy_lookup_errors():
    pol = make_policies()
    with pytest.raises(KeyError, match="unknown state"):
        pol.state_index("Z")
    with pytest.raises(KeyError, match="outside policy panel"):
        pol.year_index(1980)
    with pytest.raises(KeyError, match="not in panel"):
        pol.values("nope")


def test_policy_replace_swaps_columns():
    pol = make_policies()
    new = pol.replace(atr95=np.full((2, 3), 0.4))
    assert_allclose(new.values("atr95"), 0.4)
    assert_allclose(pol.values("atr95"), 0.05)  # original untouched
    assert_allclose(new.values("mtr"), pol.values("mtr"))


def flow_fixture():
    m = np.zeros((2, 2, 2))
    m[0, 0] = [8.0, 7.0]  # stays
    m[1, 1] = [5.0, 6.0]
    m[0, 1] = [2.0, 3.0]  # moves
    m[1, 0] = [1.0, 0.0]
    stocks = np.array([[10.0, 10.0], [8.0, 6.0]])
    return FlowPanel(np.array([1, 2]), np.array([1990, 1991]), m, stocks)


def test_flow_panel_derived_views():
    flows = flow_fixture()
    assert_allclose(flows.stays, [[8.0, 7.0], [5.0, 6.0]])
    assert flows.migrations[0, 0].tolist() == [0.0, 0.0]
    assert_allclose(flows.inflows, [[1.0, 0.0], [2.0, 3.0]])
    # shares divide by the origin stock; stays included on the diagonal
    assert_allclose(flows.observed_shares[0, 1], [0.2, 0.3])
    assert_allclose(flows.observed_shares[0, 0], [0.8, 0.7])


def test_flow_panel_zero_stock_share_is_zero():
    m = np.zeros((2, 2, 1))
    stocks = np.array([[0.0], [5.0]])
    flows = FlowPanel(np.array([1, 2]), np.array([1990]), m, stocks)
    assert flows.observed_shares[0].tolist() == [[0.0], [0.0]]


def test_flow_panel_validation():
    m = np.zeros((2, 2, 1))
    stocks = np.full((2, 1), 4.0)
    with pytest.raises(PanelValidationError, match="negative count"):
        FlowPanel(np.array([1, 2]), np.array([1990]), m - 1.0, stocks)
    big = m.copy()
    big[0, :, 0] = [3.0, 3.0]  # leavers 6 > stock 4
    with pytest.raises(PanelValidationError, match="exceed stock"):
        FlowPanel(np.array([1, 2]), np.array([1990]), big, stocks)
    with pytest.raises(PanelValidationError, match="sorted"):
        FlowPanel(np.array([2, 1]), np.array([1990]), m, stocks)
    with pytest.raises(PanelValidationError, match="shape"):
        FlowPanel(np.array([1, 2]), np.array([1990]), np.zeros((2, 2, 3)), stocks)


def test_outcome_panel_validation():
    zones = np.array([1, 2])
    years = np.array([1990, 1991])
    with pytest.raises(PanelValidationError, match="negative outcome"):
        OutcomePanel(zones, years, {"y_all": -np.ones((2, 2))})
    with pytest.raises(PanelValidationError, match="exceeds y_all"):
        OutcomePanel(zones, years, {"y_all": np.ones((2, 2)), "y_external": np.full((2, 2), 2.0)})
    panel = OutcomePanel(zones, years, {"y_all": np.ones((2, 2))})
    with pytest.raises(KeyError, match="scope"):
        panel.scope("y_external")


def test_outcome_panel_allows_nan_cells():
    grid = np.array([[1.0, np.nan], [2.0, 3.0]])
    panel = OutcomePanel(np.array([1, 2]), np.array([1990, 1991]), {"y_all": grid})
    assert np.isnan(panel.scope("y_all")[0, 1])


def test_bundle_cross_validation():
    geo = two_zone_geo()
    pol = make_policies()
    flows = flow_fixture()
    outcomes = OutcomePanel(np.array([1, 2]), np.array([1990, 1991]), {"y_all": np.ones((2, 2))})
    bundle = PanelBundle(geo, pol, flows, outcomes)
    assert bundle.zone_state_index.tolist() == [0, 1]

    other_years = OutcomePanel(np.array([1, 2]), np.array([1991, 1992]), {"y_all": np.ones((2, 2))})
    with pytest.raises(PanelValidationError, match="outcome years"):
        PanelBundle(geo, pol, flows, other_years)
    missing_state = make_policies(states=("A",))
    with pytest.raises(PanelValidationError, match="without policy coverage"):
        PanelBundle(geo, missing_state, flows, outcomes)


def test_zone_policy_maps_states_and_trims_years():
    geo = two_zone_geo()
    grid = np.array([[0.1, 0.2, 0.3], [0.15, 0.25, 0.35]])
    pol = make_policies(years=(1989, 1990, 1991), atr95=grid)
    flows = flow_fixture()  # years 1990, 1991
    outcomes = OutcomePanel(np.array([1, 2]), np.array([1990, 1991]), {"y_all": np.ones((2, 2))})
    bundle = PanelBundle(geo, pol, flows, outcomes)
    assert_allclose(bundle.zone_policy("atr95"), [[0.2, 0.3], [0.25, 0.35]])
    assert_allclose(bundle.zone_policy("atr95", log=True), np.log1p(-grid[:, 1:]))


def test_build_flow_tables_counts_moves_stays_and_stocks():
    geo = two_zone_geo()
    histories = [
        ("u1", 1990, 1),
        ("u1", 1991, 2),  # move 1 -> 2
        ("u2", 1990, 1),
        ("u2", 1991, 1),  # stay
        ("u3", 1990, 2),  # flagged but unseen next year: stock only
        ("u4", 1990, 2),
        ("u4", 1991, 1),  # move 2 -> 1
    ]
    flags = [("u1", 1990), ("u2", 1990), ("u3", 1990), ("u4", 1990)]
    flows = build_flow_tables(histories, flags, geo)
    assert flows.years.tolist() == [1990]
    assert flows.stocks[:, 0].tolist() == [2.0, 2.0]
    assert flows.m[0, 1, 0] == 1.0
    assert flows.m[0, 0, 0] == 1.0
    assert flows.m[1, 0, 0] == 1.0
    assert flows.m[1, 1, 0] == 0.0


def test_build_flow_tables_frequency_resolution():
    geo = two_zone_geo()
    histories = [
        ("u1", 1990, 1, 5.0),
        ("u1", 1990, 2, 9.0),  # higher frequency wins
        ("u2", 1990, 1, 4.0),
        ("u2", 1990, 2, 4.0),  # tie: first observed wins
    ]
    flags = [("u1", 1990), ("u2", 1990)]
    flows = build_flow_tables(histories, flags, geo)
    assert flows.stocks[:, 0].tolist() == [1.0, 1.0]

    with pytest.raises(PanelValidationError, match="no frequencies"):
        build_flow_tables([("u1", 1990, 1), ("u1", 1990, 2)], [("u1", 1990)], geo)
    with pytest.raises(PanelValidationError, match="no flagged"):
        build_flow_tables(histories, [], geo)


def test_build_log_odds_cells_and_gaps():
    geo = two_zone_geo()
    atr = np.array([[0.2, 0.2], [0.3, 0.3]])  # state A then B
    pol = make_policies(years=(1990, 1991), atr95=atr)
    flows = flow_fixture()
    outcomes = OutcomePanel(np.array([1, 2]), np.array([1990, 1991]), {"y_all": np.ones((2, 2))})
    bundle = PanelBundle(geo, pol, flows, outcomes)

    records = build_log_odds(bundle, tax_field="atr95")
    # cell (2, 1, 1991) has zero flow, so three records survive
    keys = {(r.origin, r.dest, r.year) for r in records}
    assert keys == {(1, 2, 1990), (1, 2, 1991), (2, 1, 1990)}

    r = next(r for r in records if (r.origin, r.dest, r.year) == (1, 2, 1990))
    assert_allclose(r.lhs, np.log(2.0) - np.log(8.0))
    # destination-minus-origin gap in ln(1 - tax)
    assert_allclose(r.deltas["d_ln_1m_atr95"], np.log(0.7) - np.log(0.8))
    assert set(r.deltas) == {"d_ln_1m_atr95", "d_ln_1m_citr", "d_ln_1p_itc", "d_ln_1p_rtc"}

    back = next(r for r in records if (r.origin, r.dest, r.year) == (2, 1, 1990))
    assert_allclose(back.deltas["d_ln_1m_atr95"], np.log(0.8) - np.log(0.7))
    assert_allclose(back.lhs, np.log(1.0) - np.log(5.0))
