"""Shared fixtures: a hand-sized registry and one simulated world."""

import numpy as np
import pytest

from shiftshare import GeoRegistry, SimConfig, simulate_world


@pytest.fixture(scope="session")
def tiny_geo():
    """Five zones in two states; z1/z2 adjacent, the rest spread out."""
    return GeoRegistry(
        zone_ids=np.array([1, 2, 3, 4, 5]),
        state_ids=np.array(["A", "A", "A", "B", "B"], dtype=object),
        centroids=np.array(
            [
                [40.0, -100.0],
                [40.2, -100.0],
                [42.0, -103.0],
                [36.0, -90.0],
                [35.0, -88.0],
            ]
        ),
    )


@pytest.fixture(scope="session")
def small_world():
    """One medium simulated world reused by the read-only tests."""
    config = SimConfig(n_zones=12, n_states=3, n_years=10, stock_init=400, seed=3)
    return simulate_world(config)
