"""CSV ingestion, schema mapping, and roundtrip fidelity."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from shiftshare import (
    PanelValidationError,
    SimConfig,
    load_panels,
    read_truth,
    simulate_world,
    write_panels,
    write_truth,
)


@pytest.fixture(scope="module")
def world():
    return simulate_world(SimConfig(n_zones=8, n_states=3, n_years=6, stock_init=120, seed=11))


def test_roundtrip_preserves_every_panel(tmp_path, world):
    write_panels(world.bundle, tmp_path)
    back = load_panels(tmp_path)
    assert back.geo.zone_ids.tolist() == world.bundle.geo.zone_ids.tolist()
    assert back.geo.state_ids.tolist() == world.bundle.geo.state_ids.tolist()
    assert_allclose(back.geo.centroids, world.bundle.geo.centroids)
    assert_allclose(back.flows.m, world.bundle.flows.m)
    assert_allclose(back.flows.stocks, world.bundle.flows.stocks)
    for f in ("atr95", "citr", "itc", "udda"):
        assert_allclose(back.policies.values(f), world.bundle.policies.values(f))
    for scope in world.bundle.outcomes.scopes:
        got = back.outcomes.scope(scope)
        want = world.bundle.outcomes.scope(scope)
        mask = np.isfinite(want)
        assert_allclose(got[mask], want[mask])
    for name, grid in world.bundle.outcomes.controls.items():
        assert_allclose(back.outcomes.controls[name], grid)


def test_write_is_deterministic(tmp_path, world):
    a = tmp_path / "a"
    b = tmp_path / "b"
    files_a = write_panels(world.bundle, a)
    files_b = write_panels(world.bundle, b)
    assert [p.name for p in files_a] == [p.name for p in files_b]
    for pa, pb in zip(files_a, files_b):
        assert pa.read_bytes() == pb.read_bytes()


def test_schema_maps_renamed_columns(tmp_path, world):
    write_panels(world.bundle, tmp_path)
    zones = tmp_path / "zones.csv"
    text = zones.read_text()
    header, rest = text.split("\n", 1)
    assert header == "zone_id,state_id,lat,lon"
    zones.write_text("id,st,latitude,longitude\n" + rest)
    with pytest.raises(PanelValidationError, match="zones.csv"):
        load_panels(tmp_path)
    schema = {"zones": {"zone_id": "id", "state_id": "st", "lat": "latitude", "lon": "longitude"}}
    back = load_panels(tmp_path, schema=schema)
    assert back.geo.zone_ids.tolist() == world.bundle.geo.zone_ids.tolist()


def test_missing_file_reported_by_name(tmp_path, world):
    write_panels(world.bundle, tmp_path)
    (tmp_path / "stocks.csv").unlink()
    with pytest.raises(PanelValidationError, match="stocks.csv"):
        load_panels(tmp_path)


def append_row(path, row):
    with open(path, "a") as fh:
        fh.write(row + "\n")


def test_duplicate_and_unknown_rows_rejected(tmp_path, world):
    write_panels(world.bundle, tmp_path)
    flows = (tmp_path / "flows.csv").read_text()
    first_data_row = flows.splitlines()[1]
    append_row(tmp_path / "flows.csv", first_data_row)
    with pytest.raises(PanelValidationError, match="duplicate"):
        load_panels(tmp_path)

    write_panels(world.bundle, tmp_path)
    year = world.bundle.flows.years[0]
    append_row(tmp_path / "flows.csv", f"999,1,{year},3")
    with pytest.raises(PanelValidationError, match="unknown zone"):
        load_panels(tmp_path)

    write_panels(world.bundle, tmp_path)
    append_row(tmp_path / "flows.csv", f"1,1,{year},3")
    with pytest.raises(PanelValidationError, match="stays belong in stays.csv"):
        load_panels(tmp_path)

    # flow/stay/stock years define the panel axis; other tables must fit it
    write_panels(world.bundle, tmp_path)
    append_row(tmp_path / "outcomes.csv", "1,1800,y_all,3.0")
    with pytest.raises(PanelValidationError, match="outside flow panel years"):
        load_panels(tmp_path)


def test_truth_record_roundtrip(tmp_path, world):
    record = world.truth_record()
    path = write_truth(record, tmp_path / "truth.json")
    back = read_truth(path)
    assert back.keys() == record.keys()

    def compare(got, want):
        if isinstance(want, dict):
            assert sorted(got) == sorted(want)
            for k in want:
                compare(got[k], want[k])
        else:
            assert_allclose(np.asarray(got, dtype=float), np.asarray(want, dtype=float))

    for key, value in record.items():
        compare(back[key], value)
    # key order in the file is sorted, so rewrites are stable
    assert path.read_bytes() == write_truth(record, tmp_path / "again.json").read_bytes()
