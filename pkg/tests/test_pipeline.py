"""End-to-end pipeline stages driven through the command line."""

import json

import numpy as np
import pandas as pd
import pytest

from shiftshare.cli import ESTIMATION_EXIT, VALIDATION_EXIT, main

COMMANDS = (
    "ingest",
    "choice-fit",
    "build-iv",
    "fit",
    "event-study",
    "diagnose",
    "placebo",
    "counterfactual",
    "spec-curve",
)

CONFIG_TEXT = """
seed = 5
sim_zones = 20
sim_states = 4
sim_years = 12
sim_stock = 2000
window = -2, 2
placebo_draws = 8
# random geography spreads zones over hundreds of miles
ring_edges = 500, 1500
grid.tax_field = atr95|atr99
grid.state_year_fe = false|true
"""


@pytest.fixture(scope="module")
def run_all(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    data = root / "data"
    out = root / "out"
    cfg = root / "run.cfg"
    cfg.write_text(CONFIG_TEXT, encoding="utf-8")

    assert main(["simulate", "--config", str(cfg), "--out", str(data)]) == 0
    for command in COMMANDS:
        code = main([command, "--config", str(cfg), "--data", str(data), "--out", str(out)])
        assert code == 0, f"{command} failed"
    return cfg, data, out


def test_manifest_lists_every_command(run_all):
    cfg, data, out = run_all
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest["commands"]) == set(COMMANDS)
    fit = manifest["commands"]["fit"]
    assert "fit_results.csv" in fit["outputs"]
    assert fit["switches"]["seed"] == 5
    assert "numba_enabled" in fit["switches"]
    sim_manifest = json.loads((data / "manifest.json").read_text())
    assert "simulate" in sim_manifest["commands"]


def test_ingest_report_coverage(run_all):
    cfg, data, out = run_all
    report = json.loads((out / "ingest_report.json").read_text())
    assert report["zones"] == 20
    assert report["states"] == 4
    assert report["years"] == [1990, 2001]
    assert report["flow_cells_positive"] > 0
    assert set(report["scopes"]) == {"y_all", "y_external", "y_internal"}
    assert report["log_odds_records"] > 0


def test_choice_fit_artifacts(run_all):
    cfg, data, out = run_all
    est = pd.read_csv(out / "estimates.csv")
    assert list(est.columns) == ["term", "estimate", "se", "cluster_spec"]
    assert "d_ln_1m_atr95" in set(est["term"])
    meta = json.loads((out / "choice_model.json").read_text())
    assert meta["nobs"] > 0
    assert 0 <= meta["r2_within"] <= 1
    assert meta["fe"] == ["pair", "year"]
    assert "eta" in meta and "eta_prime" in meta


def test_probabilities_rows_sum_to_one(run_all):
    cfg, data, out = run_all
    probs = pd.read_csv(out / "probabilities.csv")
    assert list(probs.columns) == ["origin", "dest", "year", "p_hat"]
    sums = probs.groupby(["origin", "year"])["p_hat"].sum()
    assert np.allclose(sums.to_numpy(), 1.0, atol=1e-8)
    inst = pd.read_csv(out / "instruments.csv")
    assert set(inst["variant"]) == {"B", "B_interstate"}
    assert inst["value"].notna().all()


def test_fit_outputs_both_estimators(run_all):
    cfg, data, out = run_all
    fit = pd.read_csv(out / "fit_results.csv")
    assert set(fit["stat_type"]) == {"2sls", "ols"}
    assert (fit["spec_id"] == "baseline").all()
    m_rows = fit[(fit["term"] == "M") & (fit["stat_type"] == "2sls")]
    assert len(m_rows) == 1
    diag = pd.read_csv(out / "diagnostics.csv")
    names = set(diag["name"])
    assert {"nobs", "effective_f", "df_t", "n_clusters_zone"} <= names
    summary = json.loads((out / "fit_summary.json").read_text())
    assert "M" in summary["params"]
    assert summary["instruments"] == ["B", "B_interstate"]
    assert "conf_int_95" in summary and "ols_params" in summary


def test_event_study_table(run_all):
    cfg, data, out = run_all
    table = pd.read_csv(out / "event_study.csv")
    assert table["j"].tolist() == [-2, -1, 0, 1, 2]
    norm = table[table["j"] == -1].iloc[0]
    assert norm["mu_hat"] == 0.0 and norm["se"] == 0.0
    meta = json.loads((out / "event_study.json").read_text())
    assert meta["window"] == [-2, 2]
    assert meta["nobs"] > 0


def test_diagnose_artifacts(run_all):
    cfg, data, out = run_all
    rot = pd.read_csv(out / "rotemberg.csv")
    assert len(rot) == 20
    assert abs(rot["weight"].sum() - 1.0) < 1e-6
    bal = pd.read_csv(out / "balance.csv")
    assert {"origin", "characteristic", "slope", "zero_variance"} <= set(bal.columns)
    rings = pd.read_csv(out / "rings.csv")
    assert set(rings["ring"]) == {"ring_1_own", "ring_(0,500]", "ring_(500,1500]"}
    report = json.loads((out / "diagnose.json").read_text())
    assert abs(report["rotemberg"]["weight_sum"] - 1.0) < 1e-6
    assert report["herfindahl"]["effective_size_origin"] > 1.0
    assert "phi_origin_level" in report["origin_level"]
    got = report["origin_level"]
    assert abs(got["phi_origin_level"] - got["phi_destination_level"]) < 1e-6


def test_placebo_artifacts(run_all):
    cfg, data, out = run_all
    draws = pd.read_csv(out / "placebo.csv")
    assert list(draws.columns) == ["draw_id", "estimate"]
    assert len(draws) == 8
    meta = json.loads((out / "placebo.json").read_text())
    assert meta["n_draws"] == 8
    assert 0.0 <= meta["rejection_rate"] <= 1.0


def test_counterfactual_artifacts(run_all):
    cfg, data, out = run_all
    cells = pd.read_csv(out / "counterfactual.csv")
    assert {"zone", "year", "delta_m", "delta_lny", "direct"} <= set(cells.columns)
    total = cells["direct"] + cells["indirect_internal"] + cells["indirect_external"]
    assert np.allclose(cells["delta_lny"], total, atol=1e-10)
    states = pd.read_csv(out / "states.csv")
    assert len(states) == 4
    meta = json.loads((out / "counterfactual.json").read_text())
    assert meta["phi_all"] is not None
    assert meta["equalized_fields"] == ["atr95", "atr99", "atr50", "mtr", "aptr"]
    assert "national" in meta


def test_spec_curve_counts(run_all):
    cfg, data, out = run_all
    cells = pd.read_csv(out / "spec_cells.csv")
    assert len(cells) == 4
    assert set(cells["tax_field"]) == {"atr95", "atr99"}
    curve = pd.read_csv(out / "spec_curve.csv")
    meta = json.loads((out / "spec_curve.json").read_text())
    assert meta["cells"] == 4
    assert meta["estimated"] + meta["failed"] == 4
    assert meta["retained"] + meta["filtered_weak"] == meta["estimated"]
    assert len(curve) == meta["retained"]
    if len(curve) > 1:
        assert curve["estimate"].is_monotonic_increasing
        assert curve["rank"].tolist() == list(range(1, len(curve) + 1))


def test_reruns_are_byte_identical(run_all):
    cfg, data, out = run_all
    before_fit = (out / "fit_results.csv").read_bytes()
    before_manifest = (out / "manifest.json").read_bytes()
    assert main(["fit", "--config", str(cfg), "--data", str(data), "--out", str(out)]) == 0
    assert (out / "fit_results.csv").read_bytes() == before_fit
    assert (out / "manifest.json").read_bytes() == before_manifest


def test_validation_failures_exit_two(run_all, tmp_path, capsys):
    cfg, data, out = run_all
    assert main(["ingest", "--config", str(cfg), "--data", str(tmp_path / "nowhere"), "--out", str(out)]) == VALIDATION_EXIT
    bad_cfg = tmp_path / "bad.cfg"
    bad_cfg.write_text("window = 5\n", encoding="utf-8")
    assert main(["fit", "--config", str(bad_cfg), "--data", str(data), "--out", str(out)]) == VALIDATION_EXIT
    err = capsys.readouterr().err
    assert "shiftshare" in err


def test_spec_curve_without_grid_exits_two(run_all, tmp_path, capsys):
    cfg, data, out = run_all
    plain = tmp_path / "plain.cfg"
    plain.write_text("seed = 5\n", encoding="utf-8")
    code = main(["spec-curve", "--config", str(plain), "--data", str(data), "--out", str(tmp_path / "o")])
    assert code == VALIDATION_EXIT
    assert "grid" in capsys.readouterr().err


def test_degenerate_policy_exits_three(run_all, tmp_path, capsys):
    cfg, data, out = run_all
    broken = tmp_path / "flat"
    broken.mkdir()
    for f in data.iterdir():
        if f.suffix == ".csv" or f.name == "truth.json":
            (broken / f.name).write_bytes(f.read_bytes())
    pol = pd.read_csv(broken / "policies.csv")
    pol["atr95"] = 0.3  # no variation anywhere: the tax gap column dies
    pol.to_csv(broken / "policies.csv", index=False)
    code = main(["choice-fit", "--config", str(cfg), "--data", str(broken), "--out", str(tmp_path / "o3")])
    assert code == ESTIMATION_EXIT
    assert "shiftshare choice-fit" in capsys.readouterr().err


def test_partial_outputs_removed_on_failure(run_all, tmp_path):
    cfg, data, out = run_all
    broken = tmp_path / "flat2"
    broken.mkdir()
    for f in data.iterdir():
        if f.suffix == ".csv" or f.name == "truth.json":
            (broken / f.name).write_bytes(f.read_bytes())
    pol = pd.read_csv(broken / "policies.csv")
    pol["atr95"] = 0.3
    pol.to_csv(broken / "policies.csv", index=False)
    o = tmp_path / "o4"
    assert main(["choice-fit", "--config", str(cfg), "--data", str(broken), "--out", str(o)]) == ESTIMATION_EXIT
    assert not (o / "estimates.csv").exists()
