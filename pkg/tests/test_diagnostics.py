"""Decompositions, balance checks, rings, and the permutation placebo."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from shiftshare import (
    EstimationError,
    GeoRegistry,
    Residualizer,
    SimConfig,
    build_bartik,
    distance_ring_design,
    herfindahl_diagnostics,
    origin_level_transform,
    permutation_placebo,
    ring_columns,
    rotemberg_decompose,
    share_balance,
    simulate_world,
)

from reference import dummy_matrix, lstsq_annihilate


def random_share_world(seed, Z=8, T=6):
    """Synthetic positive shares, stocks, and grids for identity checks."""
    rng = np.random.default_rng(seed)
    shares = rng.uniform(0.01, 0.2, size=(Z, Z, T))
    idx = np.arange(Z)
    shares[idx, idx, :] = 0.0
    stocks = rng.uniform(50.0, 200.0, size=(Z, T))
    x = np.einsum("odt,ot->dt", shares, stocks) + rng.normal(scale=2.0, size=(Z, T))
    y = 0.5 * x + rng.normal(size=(Z, T))
    return shares, stocks, x, y


def grid_geo(Z):
    cols = np.arange(Z, dtype=float)
    return GeoRegistry(
        zone_ids=np.arange(1, Z + 1),
        state_ids=np.array([f"S{c // 2:.0f}" for c in cols], dtype=object),
        centroids=np.column_stack([35.0 + cols, -100.0 + 0.5 * cols]),
    )


def test_residualizer_matches_lstsq_annihilator():
    rng = np.random.default_rng(0)
    n = 90
    f1 = rng.integers(0, 5, size=n)
    f2 = rng.integers(0, 6, size=n)
    controls = rng.normal(size=(n, 2))
    target = rng.normal(size=(n, 3))
    rz = Residualizer([f1, f2], controls)
    got = rz.residualize(target)
    X = np.column_stack([dummy_matrix([f1, f2]), controls])
    want = lstsq_annihilate(target, X)
    assert_allclose(got, want, atol=1e-8)
    assert rz.dof == (5 + 6 - 1) + 2


def test_residualizer_mask_zeroes_excluded_rows():
    rng = np.random.default_rng(1)
    n = 80
    f1 = rng.integers(0, 4, size=n)
    mask = rng.uniform(size=n) > 0.25
    target = rng.normal(size=n)
    rz = Residualizer([f1], mask=mask)
    got = rz.residualize(target)
    assert_allclose(got[~mask], 0.0)
    X = dummy_matrix([f1[mask]])
    assert_allclose(got[mask], lstsq_annihilate(target[mask, None], X)[:, 0], atol=1e-8)


def test_rotemberg_weights_sum_to_one_and_reassemble_phi():
    Z, T = 8, 6
    shares, stocks, x, y = random_share_world(3, Z, T)
    geo = grid_geo(Z)
    zone_f = np.repeat(np.arange(Z), T)
    year_f = np.tile(np.arange(T), Z)
    rz = Residualizer([zone_f, year_f])
    report = rotemberg_decompose(shares, stocks, geo, y, x, rz)
    assert_allclose(report.weight_sum, 1.0, atol=1e-10)
    assert report.phi_defined.all()
    assert_allclose(report.weighted_phi, report.phi_full, atol=1e-10)
    assert_allclose(
        report.negative_weight_sum + report.positive_weight_sum, 1.0, atol=1e-10
    )
    assert report.negative_weight_sum <= 0.0 <= report.positive_weight_sum

    # phi_full is the plain just-identified IV on residualized grids
    b = rz.residualize(np.einsum("odt,ot->dt", shares, stocks).reshape(-1))
    xr = rz.residualize(x.reshape(-1))
    yr = rz.residualize(y.reshape(-1))
    assert_allclose(report.phi_full, (b @ yr) / (b @ xr), atol=1e-10)


def test_rotemberg_weights_match_direct_covariances():
    Z, T = 6, 5
    shares, stocks, x, y = random_share_world(4, Z, T)
    geo = grid_geo(Z)
    zone_f = np.repeat(np.arange(Z), T)
    year_f = np.tile(np.arange(T), Z)
    rz = Residualizer([zone_f, year_f])
    report = rotemberg_decompose(shares, stocks, geo, y, x, rz)

    idx = np.arange(Z)
    s = shares.copy()
    s[idx, idx, :] = 0.0
    xr = rz.residualize(x.reshape(-1))
    yr = rz.residualize(y.reshape(-1))
    comps = np.stack([
        rz.residualize((s[o][:, :] * stocks[o][None, :]).reshape(-1)) for o in range(Z)
    ])
    den = comps.sum(axis=0) @ xr
    for o in range(Z):
        assert_allclose(report.weight[o], comps[o] @ xr / den, atol=1e-10)
        assert_allclose(report.phi_origin[o], comps[o] @ yr / (comps[o] @ xr), atol=1e-8)
    assert np.isfinite(report.first_stage_f).all()
    assert (report.share_variance >= 0).all()
    assert_allclose(report.mean_stock, stocks.mean(axis=1))


def test_rotemberg_per_period_sums_to_origin_weights():
    Z, T = 6, 5
    shares, stocks, x, y = random_share_world(5, Z, T)
    geo = grid_geo(Z)
    rz = Residualizer([np.repeat(np.arange(Z), T), np.tile(np.arange(T), Z)])
    report = rotemberg_decompose(shares, stocks, geo, y, x, rz, per_period=True)
    ids, w_ot, p_ot = report.per_period
    assert_allclose(w_ot.sum(axis=1), report.weight, atol=1e-10)
    assert_allclose(w_ot.sum(), 1.0, atol=1e-10)
    defined = np.isfinite(p_ot)
    assert_allclose((w_ot[defined] * p_ot[defined]).sum(), report.phi_full, atol=1e-8)
    assert report.top(3)[0]["origin"] in geo.zone_ids


def test_rotemberg_orthogonal_instrument_raises():
    Z, T = 4, 3
    geo = grid_geo(Z)
    shares = np.zeros((Z, Z, T))
    stocks = np.ones((Z, T))
    rz = Residualizer([np.repeat(np.arange(Z), T)])
    y = np.random.default_rng(0).normal(size=(Z, T))
    with pytest.raises(EstimationError, match="orthogonal"):
        rotemberg_decompose(shares, stocks, geo, y, y, rz)


def test_share_balance_recovers_a_planted_slope():
    Z, T = 6, 8
    rng = np.random.default_rng(6)
    geo = grid_geo(Z)
    char = rng.normal(size=(Z, T))
    shares = np.zeros((Z, Z, T))
    # share at t responds to the characteristic at t-1 with slope 0.05
    for o in range(Z):
        for t in range(1, T):
            shares[o, :, t] = 0.1 + 0.05 * char[:, t - 1]
        shares[o, o, :] = 0.0
    rows = share_balance(shares, {"wage": char}, geo, lag=1)
    assert len(rows) == Z
    for row in rows:
        assert not row["zero_variance"]
        assert_allclose(row["slope"], 0.05, atol=1e-10)
        assert row["correlation"] > 0.99
        assert row["se"] < 1e-8

    flat = share_balance(shares, {"flat": np.ones((Z, T))}, geo)
    assert all(r["zero_variance"] for r in flat)
    assert all(np.isnan(r["slope"]) for r in flat)


def test_share_balance_difference_removes_fixed_component():
    Z, T = 5, 7
    rng = np.random.default_rng(7)
    geo = grid_geo(Z)
    char = rng.normal(size=(Z, T))
    fixed = rng.normal(size=Z)
    shares = np.zeros((Z, Z, T))
    # share = destination fixed level + slope * lagged characteristic
    for o in range(Z):
        for t in range(1, T):
            shares[o, :, t] = np.abs(fixed) + 0.03 * char[:, t - 1]
        shares[o, o, :] = 0.0
    rows = share_balance(shares, {"c": char}, geo, lag=1, difference=True)
    for row in rows:
        assert_allclose(row["slope"], 0.03, atol=1e-10)

    weighted = share_balance(
        shares, {"c": char}, geo, lag=1, weights=np.full((Z, T), 2.0)
    )
    unweighted = share_balance(shares, {"c": char}, geo, lag=1)
    for rw, ru in zip(weighted, unweighted):
        assert_allclose(rw["slope"], ru["slope"], atol=1e-12)


def test_share_balance_origin_subset_and_lag_validation():
    Z, T = 5, 6
    shares, stocks, x, y = random_share_world(8, Z, T)
    geo = grid_geo(Z)
    rows = share_balance(shares, {"x": x}, geo, origins=[geo.zone_ids[0], geo.zone_ids[2]])
    assert [r["origin"] for r in rows] == [int(geo.zone_ids[0]), int(geo.zone_ids[2])]
    with pytest.raises(ValueError, match="lag"):
        share_balance(shares, {"x": x}, geo, lag=-1)


def test_origin_level_estimate_equals_destination_level():
    Z, T = 8, 6
    shares, stocks, x, y = random_share_world(9, Z, T)
    geo = grid_geo(Z)
    years = np.arange(2000, 2000 + T)
    result = origin_level_transform(shares, stocks, y, x, geo, years)
    assert_allclose(result.phi_origin_level, result.phi_destination_level, atol=1e-8)
    assert result.n_dropped_rows == 0
    assert result.se_origin_level > 0
    assert result.ybar.shape == (Z * T,)  # stacked origin-year rows

    # masking some destination cells keeps the identity intact
    mask = np.ones((Z, T), dtype=bool)
    mask[0, :2] = False
    masked = origin_level_transform(shares, stocks, y, x, geo, years, mask=mask)
    assert_allclose(masked.phi_origin_level, masked.phi_destination_level, atol=1e-8)


def test_herfindahl_hand_values():
    Z, T = 3, 1
    shares = np.zeros((Z, Z, T))
    shares[0, 1, 0] = 0.3  # exposure weights: o0 -> 0.3, o1 -> 0.1, o2 -> 0.6
    shares[1, 2, 0] = 0.1
    shares[2, 0, 0] = 0.4
    shares[2, 1, 0] = 0.2
    report = herfindahl_diagnostics(shares)
    p = np.array([0.3, 0.1, 0.6])
    want_hhi = float((p**2).sum())
    assert_allclose(report.hhi_origin, want_hhi)
    assert_allclose(report.effective_size_origin, 1.0 / want_hhi)
    assert_allclose(report.largest_weight_origin, 0.6)
    # one year only: the origin-year level coincides
    assert_allclose(report.hhi_origin_year, want_hhi)

    with pytest.raises(EstimationError, match="zero"):
        herfindahl_diagnostics(np.zeros((2, 2, 1)))


def distance_ring_design_from_values(values, geo):
    """Tiny adapter so the hand test reads like the public call."""

    class _Flows:
        inflows = values

    return distance_ring_design(_Flows, geo, [50.0, 100.0])


def test_ring_columns_partition_the_total():
    geo = GeoRegistry(
        zone_ids=np.array([1, 2, 3]),
        state_ids=np.array(["A", "A", "B"], dtype=object),
        centroids=np.array([[40.0, -100.0], [41.0855, -100.0], [48.0, -100.0]]),
    )
    values = np.array([[1.0, 2.0], [10.0, 20.0], [100.0, 200.0]])
    # zone 1 to zone 2 is almost exactly 75 miles
    assert_allclose(geo.distance_matrix[0, 1], 75.0, atol=0.05)
    cols, names = distance_ring_design_from_values(values, geo)
    assert names == ("ring_1_own", "ring_(0,50]", "ring_(50,100]")
    assert_allclose(cols[0, :, 0], values[0])
    assert_allclose(cols[0, :, 1], 0.0)  # nothing within 50 miles
    assert_allclose(cols[0, :, 2], values[1])  # the 75-mile neighbor
    assert_allclose(cols[2, :, 1], 0.0)
    assert_allclose(cols[2, :, 2], 0.0)  # zone 3 is far from everything

    # with exhaustive edges the rings partition the cross-zone total
    wide = ring_columns(values, geo, [50.0, 100.0, 5000.0])
    assert_allclose(wide.sum(axis=2), values + (values.sum(axis=0)[None, :] - values))

    with pytest.raises(ValueError, match="strictly increasing"):
        ring_columns(values, geo, [100.0, 50.0])
    with pytest.raises(ValueError, match="positive"):
        ring_columns(values, geo, [-5.0, 50.0])


@pytest.fixture(scope="module")
def placebo_world():
    world = simulate_world(SimConfig(n_zones=10, n_states=3, n_years=8, stock_init=300, seed=23))
    flows = world.bundle.flows
    z = build_bartik(flows.observed_shares, flows.stocks, world.bundle.geo, "all")
    y = np.log1p(world.bundle.outcomes.scope("y_all"))
    x = flows.inflows.astype(float)
    return world, y, x, z.values


def test_placebo_identity_debug_reproduces_baseline(placebo_world):
    world, y, x, z = placebo_world
    res = permutation_placebo(y, x, z, world.bundle.geo, n_draws=6, seed=1, identity_debug=True)
    assert_allclose(res.estimates, res.baseline, atol=1e-12)
    assert res.n_draws == 6


def test_placebo_is_deterministic_and_summarized(placebo_world):
    world, y, x, z = placebo_world
    a = permutation_placebo(y, x, z, world.bundle.geo, n_draws=12, seed=7)
    b = permutation_placebo(y, x, z, world.bundle.geo, n_draws=12, seed=7)
    assert np.array_equal(a.estimates, b.estimates)
    c = permutation_placebo(y, x, z, world.bundle.geo, n_draws=12, seed=8)
    assert not np.array_equal(a.estimates, c.estimates)
    assert_allclose(a.mean, a.estimates.mean())
    assert_allclose(a.sd, a.estimates.std(ddof=1))
    assert a.ci_low <= a.ci_high
    assert 0.0 <= a.rejection_rate <= 1.0
    assert a.excluded_zones == ()
    assert len(a.rows()) == 12
    assert a.rows()[0]["draw_id"] == 0


def test_placebo_excludes_zones_without_state_mates():
    geo = GeoRegistry(
        zone_ids=np.array([1, 2, 3]),
        state_ids=np.array(["A", "A", "B"], dtype=object),
        centroids=np.array([[40.0, -100.0], [41.0, -100.0], [45.0, -90.0]]),
    )
    rng = np.random.default_rng(2)
    y = rng.normal(size=(3, 6))
    x = rng.normal(size=(3, 6))
    z = x + rng.normal(scale=0.1, size=(3, 6))
    res = permutation_placebo(y, x, z, geo, n_draws=4, seed=3)
    assert res.excluded_zones == (3,)
