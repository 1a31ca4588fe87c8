"""Alternating-projection demeaning against dense dummy regressions."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

import shiftshare._accel as accel
from shiftshare import ConvergenceError, absorb, absorbed_dof, drop_singletons
from shiftshare.hdfe import encode_factors

from reference import dummy_matrix, ols_with_dummies


def random_problem(rng, n=400, k=3, sizes=(12, 7)):
    factors = [rng.integers(0, s, size=n) for s in sizes]
    block = rng.normal(size=(n, k))
    # give the columns real factor structure so absorption has work to do
    for f, s in zip(factors, sizes):
        block += rng.normal(size=(s, k))[f]
    return block, factors


def test_two_factor_absorption_matches_dense_dummies():
    rng = np.random.default_rng(0)
    block, factors = random_problem(rng)
    result = absorb(block, factors)
    X = dummy_matrix(factors)
    proj, *_ = np.linalg.lstsq(X, block, rcond=None)
    assert_allclose(result.values, block - X @ proj, atol=1e-8)


def test_three_factor_absorption_matches_dense_dummies():
    rng = np.random.default_rng(1)
    block, factors = random_problem(rng, n=600, sizes=(9, 6, 5))
    result = absorb(block, factors, tol=1e-12)
    X = dummy_matrix(factors)
    proj, *_ = np.linalg.lstsq(X, block, rcond=None)
    assert_allclose(result.values, block - X @ proj, atol=1e-7)


def test_weighted_absorption_matches_sqrt_weight_regression():
    rng = np.random.default_rng(2)
    block, factors = random_problem(rng, n=300)
    weights = rng.uniform(0.2, 3.0, size=300)
    result = absorb(block, factors, weights=weights, tol=1e-12)
    X = dummy_matrix(factors)
    sw = np.sqrt(weights)[:, None]
    proj, *_ = np.linalg.lstsq(X * sw, block * sw, rcond=None)
    assert_allclose(result.values, block - X @ proj, atol=1e-7)


def test_zero_weight_rows_act_as_row_masks():
    rng = np.random.default_rng(3)
    block, factors = random_problem(rng, n=200)
    weights = (rng.uniform(size=200) > 0.3).astype(float)
    keep = weights > 0
    result = absorb(block, factors, weights=weights, tol=1e-12)
    sub = absorb(block[keep], [f[keep] for f in factors], tol=1e-12)
    assert_allclose(result.values[keep], sub.values, atol=1e-8)


def test_rebuilt_effects_reconstruct_the_input():
    rng = np.random.default_rng(4)
    block, factors = random_problem(rng, n=250)
    result = absorb(block, factors, tol=1e-12)
    assert_allclose(result.values + result.rebuilt_effects(), block, atol=1e-8)


def test_one_dimensional_input_round_trips():
    rng = np.random.default_rng(5)
    y = rng.normal(size=150)
    factors = [rng.integers(0, 6, size=150)]
    result = absorb(y, factors)
    assert result.values.shape == (150,)
    # single factor converges in one sweep to exact group demeaning
    codes, _ = encode_factors(factors)
    means = np.bincount(codes[:, 0], weights=y) / np.bincount(codes[:, 0])
    assert_allclose(result.values, y - means[codes[:, 0]], atol=1e-12)


def test_convergence_error_reports_sweeps_and_tol():
    rng = np.random.default_rng(6)
    block, factors = random_problem(rng, n=500, sizes=(40, 37))
    with pytest.raises(ConvergenceError) as err:
        absorb(block, factors, tol=1e-14, max_sweeps=1)
    assert err.value.sweeps == 1
    assert err.value.tol == 1e-14


def test_absorb_input_validation():
    block = np.zeros((4, 2))
    with pytest.raises(ValueError, match="factor length"):
        absorb(block, [np.zeros(3, dtype=int)])
    with pytest.raises(ValueError, match="nonnegative"):
        absorb(block, [np.zeros(4, dtype=int)], weights=np.array([1.0, -1.0, 1.0, 1.0]))
    with pytest.raises(ValueError, match="at least one factor"):
        absorb(block, [])


def test_drop_singletons_is_iterative():
    f1 = np.array([0, 0, 1, 2, 2])
    f2 = np.array([0, 1, 1, 2, 2])
    keep = drop_singletons([f1, f2])
    # rows 0 (f2) and 2 (f1) go first; that leaves row 1 doubly singleton
    assert keep.tolist() == [False, False, False, True, True]

    f1 = np.array([0, 0, 1])
    f2 = np.array([0, 1, 1])
    assert not drop_singletons([f1, f2]).any()


def test_absorbed_dof_counts_levels_minus_connections():
    f1 = np.array([0, 0, 1, 1, 2])
    f2 = np.array([0, 1, 0, 1, 2])
    assert absorbed_dof([f1]) == 3
    assert absorbed_dof([f1, f2]) == 3 + 3 - 1


def test_encode_factors_maps_arbitrary_labels():
    codes, keys = encode_factors([np.array(["b", "a", "b"], dtype=object)])
    assert codes[:, 0].tolist() == [1, 0, 1]
    assert keys[0].tolist() == ["a", "b"]


def test_numba_and_numpy_sweeps_agree_bitwise():
    if not accel.HAS_NUMBA:
        pytest.skip("numba not installed")
    rng = np.random.default_rng(7)
    block, factors = random_problem(rng, n=800, sizes=(15, 11, 4))
    old = accel.USE_NUMBA
    try:
        accel.USE_NUMBA = True
        fast = absorb(block, factors)
        accel.USE_NUMBA = False
        slow = absorb(block, factors)
    finally:
        accel.USE_NUMBA = old
    assert fast.sweeps == slow.sweeps
    assert np.array_equal(fast.values, slow.values)
