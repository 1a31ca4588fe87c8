"""Zone registry: state membership, centroids, distances, nearest neighbors."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

__all__ = ["GeoRegistry", "great_circle_miles", "EARTH_RADIUS_MILES"]

EARTH_RADIUS_MILES = 3958.7613


def great_circle_miles(lat1, lon1, lat2, lon2):
    """Haversine distance in miles; inputs in degrees, broadcastable."""
    lat1, lon1, lat2, lon2 = (np.radians(np.asarray(a, dtype=float)) for a in (lat1, lon1, lat2, lon2))
    dlat = lat2 - lat1
    dlon = lon2 - lon1
    h = np.sin(dlat / 2.0) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin(dlon / 2.0) ** 2
    # clip guards roundoff for antipodal / coincident points
    return 2.0 * EARTH_RADIUS_MILES * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


@dataclass(frozen=True)
class GeoRegistry:
    """Immutable zone-to-state map with centroids.

    Zones are identified by integer ids (sorted, unique); states by
    string labels.  Geometry is exposed through the distance matrix and
    the nearest-neighbor map, both derived lazily.
    """

    zone_ids: np.ndarray
    state_ids: np.ndarray
    centroids: np.ndarray  # (Z, 2) latitude, longitude in degrees

    def __post_init__(self):
        zone_ids = np.asarray(self.zone_ids, dtype=np.int64)
        state_ids = np.asarray(self.state_ids, dtype=object)
        centroids = np.asarray(self.centroids, dtype=float)
        if zone_ids.ndim != 1 or state_ids.shape != zone_ids.shape:
            raise ValueError("zone_ids and state_ids must be parallel 1-d arrays")
        if centroids.shape != (zone_ids.size, 2):
            raise ValueError("centroids must be (n_zones, 2)")
        if zone_ids.size != np.unique(zone_ids).size:
            raise ValueError("duplicate zone ids")
        if not np.all(np.diff(zone_ids) > 0):
            order = np.argsort(zone_ids)
            zone_ids = zone_ids[order]
            state_ids = state_ids[order]
            centroids = centroids[order]
        lat, lon = centroids[:, 0], centroids[:, 1]
        if np.any((lat < -90) | (lat > 90) | (lon < -180) | (lon > 180)):
            raise ValueError("centroid out of degree domain")
        object.__setattr__(self, "zone_ids", zone_ids)
        object.__setattr__(self, "state_ids", state_ids)
        object.__setattr__(self, "centroids", centroids)

    @property
    def n_zones(self) -> int:
        return self.zone_ids.size

    @cached_property
    def _index_of(self) -> dict[int, int]:
        return {int(z): i for i, z in enumerate(self.zone_ids)}

    def index(self, zone_id: int) -> int:
        try:
            return self._index_of[int(zone_id)]
        except KeyError:
            raise KeyError(f"unknown zone id {zone_id}") from None

    @cached_property
    def states(self) -> np.ndarray:
        """Sorted unique state labels."""
        return np.unique(self.state_ids)

    @cached_property
    def state_codes(self) -> np.ndarray:
        """(Z,) int codes into ``states``."""
        lookup = {s: i for i, s in enumerate(self.states)}
        return np.array([lookup[s] for s in self.state_ids], dtype=np.int64)

    def state_of(self, zone_id: int) -> str:
        return self.state_ids[self.index(zone_id)]

    @cached_property
    def distance_matrix(self) -> np.ndarray:
        """(Z, Z) great-circle miles between zone centroids."""
        lat = self.centroids[:, 0]
        lon = self.centroids[:, 1]
        return great_circle_miles(lat[:, None], lon[:, None], lat[None, :], lon[None, :])

    def distance(self, zone_a: int, zone_b: int) -> float:
        return float(self.distance_matrix[self.index(zone_a), self.index(zone_b)])

    @cached_property
    def neighbor_index(self) -> np.ndarray:
        """(Z,) index of each zone's nearest other zone.

        Distance ties break toward the smaller zone id; argmin on the
        id-sorted axis gives exactly that.
        """
        if self.n_zones < 2:
            raise ValueError("nearest neighbors undefined with a single zone")
        d = self.distance_matrix.copy()
        np.fill_diagonal(d, np.inf)
        return np.argmin(d, axis=1)

    def neighbor_of(self, zone_id: int) -> int:
        return int(self.zone_ids[self.neighbor_index[self.index(zone_id)]])

    @cached_property
    def same_state_others(self) -> list[np.ndarray]:
        """Per zone index, indices of the other zones in its state."""
        out = []
        codes = self.state_codes
        for i in range(self.n_zones):
            same = np.flatnonzero(codes == codes[i])
            out.append(same[same != i])
        return out
