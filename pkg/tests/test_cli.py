import json

import pytest

from mcxtfc.basis import ConfigurationError
from mcxtfc.cli import (EXIT_OK, EXIT_USAGE, OUTPUT_ROOT_ENV, SCHEMA, Experiment, RunConfig,
                        collect_summaries, execute, main, report)
from mcxtfc.uq import EnsembleSpec


def _harmonic_cfg(**kw):
    return RunConfig(Experiment.HARMONIC, ensemble=EnsembleSpec(20, 3),
                     harmonic={"B": 1.0, "problem": {"n_obs": 30}}, **kw)


def test_run_config_roundtrip(tmp_path):
    cfg = RunConfig(Experiment.PULMONARY_DISCREPANCY, params={"hr": 70.0}, variant="inductive",
                    grid={"h": 0.01, "p": 10, "L": 10}, weights={"lambda_eq": 1, "lambda_data": 2},
                    ensemble=EnsembleSpec(5, 7, parallel=2), cycles=2, sample_rate=500.0,
                    harmonic={"lambdas": [0, 1]}, output="x")
    assert RunConfig.load(cfg.save(tmp_path / "c.json")) == cfg
    assert cfg.collocation_grid().n_neurons == 10


def test_config_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{\n  "experiment": "harmonic",\n  "cycles": ,\n}\n')
    with pytest.raises(ConfigurationError, match="line 3, column"):
        RunConfig.load(bad)
    with pytest.raises(ConfigurationError, match="unknown config field"):
        RunConfig.from_dict({"experimnt": "harmonic"})
    with pytest.raises(ConfigurationError):
        RunConfig.from_dict({"experiment": "tea"})
    with pytest.raises(ConfigurationError, match="unknown model parameters"):
        RunConfig(params={"r_xyz": 1.0}).validate()
    with pytest.raises(ConfigurationError):
        RunConfig(scenario="Sc7").validate()


def test_single_replicate_rejected_before_compute(tmp_path):
    cfg = RunConfig(Experiment.ABLATION, ensemble=EnsembleSpec(1))
    with pytest.raises(ConfigurationError, match="two replicates"):
        cfg.validate()
    path = _harmonic_cfg().save(tmp_path / "c.json")
    d = json.loads(path.read_text())
    d["ensemble"]["n_reps"] = 1
    path.write_text(json.dumps(d))
    out = tmp_path / "never"
    assert main(["run", "--config", str(path), "--out", str(out)]) == EXIT_USAGE
    assert not out.exists()


def test_persisted_config_reproduces_outputs(tmp_path):
    out1, _ = execute(_harmonic_cfg(), tmp_path / "a")
    cfg = RunConfig.load(out1 / "config.json")
    out2, _ = execute(cfg, tmp_path / "b")
    for name in ("bands.csv", "k_values.csv"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()
    assert (out1 / "harmonic.svg").read_bytes() == (out2 / "harmonic.svg").read_bytes()


def test_cli_harmonic_summary(tmp_path, capsys):
    rc = main(["run", "harmonic", "--B", "1", "--reps", "30", "--parallel", "1",
               "--out", str(tmp_path / "h")])
    assert rc == EXIT_OK
    printed = json.loads(capsys.readouterr().out)
    row = printed["rows"]["B=1.0"]
    assert {"k_mean", "k_std", "n_ok"} <= set(row) and row["n_ok"] == 30
    s = json.loads((tmp_path / "h" / "summary.json").read_text())
    assert s["schema"] == SCHEMA and s["kind"] == "k_table"
    assert "k estimates" in report(tmp_path)


def test_default_output_root(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    cfg = RunConfig(Experiment.ABLATION, scenario="Sc3", ensemble=EnsembleSpec(4, 9))
    assert cfg.default_output() == tmp_path / "root" / "ablation-Sc3-seed9"


def test_simulate_writes_trace(tmp_path):
    assert main(["simulate", "--cycles", "1", "--out", str(tmp_path / "s")]) == EXIT_OK
    header = (tmp_path / "s" / "trace.csv").read_text().splitlines()[0]
    assert header.startswith("t,P_l")
    assert (tmp_path / "s" / "observations.csv").exists()
    assert (tmp_path / "s" / "trace.svg").read_text().lstrip().startswith("<?xml")


def test_ablation_smoke(tmp_path):
    rc = main(["run", "ablation", "--scenario", "Sc5", "--reps", "3", "--cycles", "1",
               "--parallel", "1", "--out", str(tmp_path / "abl")])
    assert rc == EXIT_OK
    out = tmp_path / "abl"
    for name in ("bands.csv", "cov.csv", "correlation.csv", "params.csv", "theta_series.csv",
                 "pressures.svg", "flows.svg", "config.json", "summary.json"):
        assert (out / name).exists(), name
    bands = (out / "bands.csv").read_text().splitlines()
    assert "t [s]" in bands[0]
    assert {line.split(",")[1] for line in bands[1:]} >= {"P_l", "P_a", "P_v", "P_r", "P_pa", "P_pv"}
    assert "r_pv_mean" in (out / "theta_series.csv").read_text().splitlines()[0]
    table = report(tmp_path)
    assert "CoV [%]" in table and "Sc5" in table and "r_pv" in table


def _fake_ablation(root, sc):
    d = root / f"ablation-{sc}"
    d.mkdir(parents=True)
    s = {"schema": SCHEMA, "kind": "ablation", "experiment": "ablation", "label": d.name,
         "runtime_s": 1.0,
         "metrics": {"scenario": sc, "cov": {"P_a": 0.03, "Q_a": 0.01}, "params": {},
                     "true_params": {}}}
    (d / "summary.json").write_text(json.dumps(s))


def test_report_grid_layout(tmp_path):
    _fake_ablation(tmp_path, "Sc1")
    one = report(tmp_path).splitlines()
    assert one[1].split() == ["variable", "Sc1"]
    assert [line.split()[0] for line in one[3:5]] == ["P_a", "Q_a"]
    for sc in ("Sc2", "Sc3", "Sc4", "Sc5", "Sc6"):
        _fake_ablation(tmp_path, sc)
    grid = report(tmp_path).splitlines()
    assert grid[1].split() == ["variable", "Sc1", "Sc2", "Sc3", "Sc4", "Sc5", "Sc6"]
    assert grid[3].split() == ["P_a"] + ["3.00"] * 6


def test_report_empty_and_mixed(tmp_path, capsys):
    assert main(["report", str(tmp_path)]) == EXIT_OK
    assert capsys.readouterr().out.strip() == "no results"
    _fake_ablation(tmp_path, "Sc1")
    other = tmp_path / "foreign"
    other.mkdir()
    (other / "summary.json").write_text(json.dumps({"schema": "something-else/2"}))
    with pytest.raises(ConfigurationError, match="foreign"):
        collect_summaries(tmp_path)
    assert main(["report", str(tmp_path)]) == EXIT_USAGE


def test_unknown_experiment_is_usage_error(capsys):
    assert main(["run", "bogus"]) == EXIT_USAGE
    assert "unknown experiment" in capsys.readouterr().err
    assert main(["run"]) == EXIT_USAGE
