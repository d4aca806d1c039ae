import json
import os

import pandas as pd
import pytest
from click.testing import CliRunner

from diffabm.cli import main


@pytest.fixture()
def runner():
    return CliRunner()


def write_config(tmp_path, name="config.json", **over):
    doc = {
        "population": {"n": 200},
        "epi": {
            "r0": 3.0,
            "latent_period": 2,
            "infectious_period": 4,
            "initial_infected_frac": 0.05,
        },
        "execution": {"horizon_steps": 10, "mode": "stochastic", "seed": 1},
    }
    doc.update(over)
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def test_simulate_twice_writes_identical_files(runner, tmp_path):
    cfg = write_config(tmp_path)
    outs = [str(tmp_path / "r1"), str(tmp_path / "r2")]
    for out in outs:
        result = runner.invoke(main, [
            "simulate", "--config", cfg, "--seed", "7", "--out", out])
        assert result.exit_code == 0, result.output
    for name in ("trajectory.csv", "monthly.csv", "meta.json",
                 "config.json", "manifest.json"):
        with open(os.path.join(outs[0], name), "rb") as fa, \
                open(os.path.join(outs[1], name), "rb") as fb:
            assert fa.read() == fb.read(), name


def test_simulate_requires_config_flag(runner, tmp_path):
    result = runner.invoke(main, [
        "simulate", "--seed", "1", "--out", str(tmp_path / "o")])
    assert result.exit_code == 2
    assert "--config" in result.output


def test_simulate_requires_seed(runner, tmp_path):
    cfg = write_config(tmp_path)
    result = runner.invoke(main, [
        "simulate", "--config", cfg, "--out", str(tmp_path / "o")])
    assert result.exit_code == 2
    assert "--seed" in result.output


def test_unknown_flag_is_usage_error(runner, tmp_path):
    cfg = write_config(tmp_path)
    result = runner.invoke(main, [
        "simulate", "--config", cfg, "--seed", "1",
        "--out", str(tmp_path / "o"), "--turbo"])
    assert result.exit_code == 2


def test_unknown_provider_is_usage_error(runner, tmp_path):
    cfg = write_config(tmp_path)
    result = runner.invoke(main, [
        "simulate", "--config", cfg, "--seed", "1",
        "--out", str(tmp_path / "o"), "--provider", "oracle"])
    assert result.exit_code == 2
    assert "oracle" in result.output


def test_validate_echoes_defaults(runner, tmp_path):
    path = tmp_path / "min.json"
    path.write_text("{}")
    result = runner.invoke(main, ["validate", "--config", str(path)])
    assert result.exit_code == 0
    assert '"n": 1000' in result.output
    assert "config_hash: " in result.output


def test_validate_lists_all_violations(runner, tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"epi": {"beta": -1.0},
                                "labor": {"gamma0": 0.5}}))
    result = runner.invoke(main, ["validate", "--config", str(path)])
    assert result.exit_code == 1
    assert "/epi/beta" in result.output
    assert "/labor/gamma0" in result.output


def test_validate_rejects_malformed_json(runner, tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    result = runner.invoke(main, ["validate", "--config", str(path)])
    assert result.exit_code == 1


def test_popgen_writes_agents_and_manifest(runner, tmp_path):
    cfg = write_config(tmp_path)
    out = str(tmp_path / "pop")
    result = runner.invoke(main, ["popgen", "--config", cfg, "--out", out])
    assert result.exit_code == 0, result.output
    agents = pd.read_csv(os.path.join(out, "agents.csv"))
    assert len(agents) == 200
    with open(os.path.join(out, "manifest.json")) as fh:
        manifest = json.load(fh)
    assert manifest["command"] == "popgen"
    assert len(manifest["config_hash"]) == 64
    assert manifest["version"]


def test_counterfactual_report_has_both_hashes(runner, tmp_path):
    cfg = write_config(tmp_path)
    out = str(tmp_path / "cf")
    result = runner.invoke(main, [
        "analyze", "counterfactual", "--config", cfg, "--seed", "3",
        "--out", out, "--patch", '{"epi.R0": 5.5}', "--n-seeds", "2"])
    assert result.exit_code == 0, result.output
    with open(os.path.join(out, "report.json")) as fh:
        report = json.load(fh)
    assert len(report["baseline_hash"]) == 64
    assert len(report["patched_hash"]) == 64
    assert report["baseline_hash"] != report["patched_hash"]
    deltas = pd.read_csv(os.path.join(out, "deltas.csv"))
    assert "new_infections_delta_mean" in deltas.columns
    assert len(deltas) == 10


def test_counterfactual_bad_patch_json_is_usage_error(runner, tmp_path):
    cfg = write_config(tmp_path)
    result = runner.invoke(main, [
        "analyze", "counterfactual", "--config", cfg, "--seed", "1",
        "--out", str(tmp_path / "o"), "--patch", "{oops"])
    assert result.exit_code == 2


def test_counterfactual_unknown_patch_path_is_domain_error(runner, tmp_path):
    cfg = write_config(tmp_path)
    result = runner.invoke(main, [
        "analyze", "counterfactual", "--config", cfg, "--seed", "1",
        "--out", str(tmp_path / "o"), "--patch", '{"epi.rnought": 2}'])
    assert result.exit_code == 1


def test_poll_cli_writes_table(runner, tmp_path):
    cfg = write_config(tmp_path)
    out = str(tmp_path / "poll")
    query = '{"metric": "median_income", "group_by": ["age_band"]}'
    result = runner.invoke(main, [
        "analyze", "poll", "--config", cfg, "--seed", "2", "--out", out,
        "--query", query])
    assert result.exit_code == 0, result.output
    table = pd.read_csv(os.path.join(out, "poll.csv"))
    assert set(["age_band", "count", "value"]).issubset(table.columns)
    assert table["count"].sum() == 200


def test_poll_query_from_file(runner, tmp_path):
    cfg = write_config(tmp_path)
    qpath = tmp_path / "q.json"
    qpath.write_text('{"metric": "infection_rate"}')
    out = str(tmp_path / "pollf")
    result = runner.invoke(main, [
        "analyze", "poll", "--config", cfg, "--seed", "2", "--out", out,
        "--query", f"@{qpath}"])
    assert result.exit_code == 0, result.output


def test_prospective_cli_identical_protocols(runner, tmp_path):
    cfg = write_config(
        tmp_path, name="mf.json",
        vaccine={"enabled": True, "daily_supply": 10},
        execution={"horizon_steps": 20, "mode": "mean-field", "seed": 0},
        epi={"r0": 3.0, "latent_period": 2, "infectious_period": 5,
             "mortality_prob": 0.02, "initial_infected_frac": 0.02},
    )
    out = str(tmp_path / "sweep")
    result = runner.invoke(main, [
        "analyze", "prospective", "--config", cfg, "--seed", "0",
        "--out", out,
        "--protocol-a", '{"dose_gap": 21}',
        "--protocol-b", '{"dose_gap": 21}',
        "--sweep", '{"field": "first_dose_efficacy", "grid": [0.5]}'])
    assert result.exit_code == 0, result.output
    with open(os.path.join(out, "report.json")) as fh:
        report = json.load(fh)
    assert report["fitness"] == [1.0]
    curve = pd.read_csv(os.path.join(out, "fitness.csv"))
    assert list(curve["first_dose_efficacy"]) == [0.5]


def test_calibrate_cli_writes_model(runner, tmp_path):
    cfg = write_config(
        tmp_path, name="cal.json",
        population={"n": 120},
        labor={"iur_series": [0.5]},
        execution={"horizon_steps": 14, "mode": "mean-field", "seed": 0},
    )
    cases = tmp_path / "cases.csv"
    cases.write_text("week,cases\n0,5.0\n1,3.0\n")
    unemp = tmp_path / "unemp.csv"
    unemp.write_text("month,unemployment_rate\n0,0.2\n")
    out = str(tmp_path / "fit")
    result = runner.invoke(main, [
        "calibrate", "--config", cfg, "--seed", "4", "--out", out,
        "--observed-cases", str(cases),
        "--observed-unemployment", str(unemp),
        "--epochs", "2", "--hidden", "3", "--width", "2"])
    assert result.exit_code == 0, result.output
    with open(os.path.join(out, "model.json")) as fh:
        model = json.load(fh)
    assert model["hidden"] == 3
    history = pd.read_csv(os.path.join(out, "history.csv"))
    assert len(history) == 2
    with open(os.path.join(out, "calibration.json")) as fh:
        summary = json.load(fh)
    assert -1.0 <= summary["gamma0"] <= 0.0


def test_calibrate_epochs_zero_reports_no_change(runner, tmp_path):
    cfg = write_config(
        tmp_path, name="cal0.json",
        population={"n": 120},
        labor={"iur_series": [0.5]},
        execution={"horizon_steps": 14, "mode": "mean-field", "seed": 0},
    )
    cases = tmp_path / "c.csv"
    cases.write_text("week,cases\n0,5.0\n1,3.0\n")
    unemp = tmp_path / "u.csv"
    unemp.write_text("month,unemployment_rate\n0,0.2\n")
    result = runner.invoke(main, [
        "calibrate", "--config", cfg, "--seed", "4",
        "--out", str(tmp_path / "fit0"),
        "--observed-cases", str(cases),
        "--observed-unemployment", str(unemp),
        "--epochs", "0"])
    assert result.exit_code == 0, result.output
    assert "no epochs run" in result.output
