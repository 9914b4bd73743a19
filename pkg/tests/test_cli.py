import json
import math

import pytest
import yaml

import cli
from config import BUILTIN_SCENARIOS

DEMO = {
    "scenario": "demo",
    "model": {"kind": "plane_wave", "momentum": [0.0, 0.0, 1.0]},
    "simulation": {
        "n_paths": 64, "tau_start": 0.0, "tau_end": 0.5, "dtau": 0.05, "master_seed": 5,
        "initial": {"kind": "box", "high": [2.0 * math.pi, 0.0, 0.0, math.pi]},
    },
    "checks": [
        {"name": "lorentz_invariant"},
        {"name": "energy_constancy"},
        {"name": "partial_integration", "field": "constant"},
        {"name": "kg_residual"},
        {"name": "curl_identity"},
        {"name": "gauge_invariance"},
        {"name": "action_stationarity"},
        {"name": "fokker_planck"},
        {"name": "osmotic", "drift_kind": "re", "expected_fail": True,
         "label": "osmotic_real_drift"},
        {"name": "charge_conservation"},
    ],
    "output": {"dump_paths": True, "export_grids": True},
}


def write_scenario(directory, document=DEMO):
    path = directory / "scenario.yaml"
    path.write_text(yaml.safe_dump(document))
    return path


def read_records(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


def test_list_prints_every_builtin(capsys):
    assert cli.main(["list"]) == cli.EXIT_OK
    out = capsys.readouterr().out
    for name in BUILTIN_SCENARIOS:
        assert name in out


def test_dump_schema_is_yaml(capsys):
    assert cli.main(["dump-schema"]) == cli.EXIT_OK
    assert "sections" in yaml.safe_load(capsys.readouterr().out)


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["--version"])
    assert info.value.code == 0
    assert cli.VERSION in capsys.readouterr().out


def test_missing_file_is_a_config_error(tmp_path, capsys):
    assert cli.main(["run", str(tmp_path / "missing.yaml")]) == cli.EXIT_CONFIG
    assert capsys.readouterr().out.startswith("[ERROR]")


def test_bad_documents_are_config_errors(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("simulation:\n  n_pathz: 3\n")
    assert cli.main(["run", str(path)]) == cli.EXIT_CONFIG
    path.write_text("simulation: [1,\n")
    assert cli.main(["run", str(path)]) == cli.EXIT_CONFIG
    assert cli.main(["run", "--builtin", "nope"]) == cli.EXIT_CONFIG
    assert cli.main(["run", str(write_scenario(tmp_path)), "--workers", "0"]) == cli.EXIT_CONFIG


def test_run_writes_artifacts(tmp_path, capsys):
    assert cli.main(["-q", "run", str(write_scenario(tmp_path)),
                     "--output", str(tmp_path / "out")]) == cli.EXIT_OK
    out = capsys.readouterr().out
    assert "overall: OK" in out and "[OK]" in out
    directory = tmp_path / "out" / "demo"
    records = read_records(directory / "reports.jsonl")
    assert records[0]["kind"] == "header" and records[0]["master_seed"] == 5
    checks = records[1:]
    assert [r["name"] for r in checks][-2:] == ["osmotic_real_drift", "charge_conservation"]
    assert all(r["outcome_ok"] for r in checks)
    control = next(r for r in checks if r["name"] == "osmotic_real_drift")
    assert control["expected_fail"] and not control["passed"]
    assert (directory / "summary.txt").read_text().rstrip().endswith("overall: OK")
    assert len((directory / "paths.jsonl").read_text().splitlines()) == 1 + 64 * 11
    for name in ("grid_density_analytic.csv", "grid_current_kg.csv",
                 "grid_density_histogram.csv", "grid_current_stochastic.csv"):
        assert (directory / name).read_text().startswith("# scenario=demo")


def test_reports_are_reproducible_across_runs_and_workers(tmp_path):
    scenario = str(write_scenario(tmp_path))
    outputs = []
    for name, workers in (("a", "1"), ("b", "1"), ("c", "3")):
        assert cli.main(["-q", "run", scenario, "--output", str(tmp_path / name),
                         "--workers", workers]) == cli.EXIT_OK
        outputs.append((tmp_path / name / "demo" / "reports.jsonl").read_bytes())
    assert outputs[0] == outputs[1] == outputs[2]


def test_provenance_reruns_the_same_scenario(tmp_path):
    assert cli.main(["-q", "run", str(write_scenario(tmp_path)),
                     "--output", str(tmp_path / "first")]) == cli.EXIT_OK
    provenance = tmp_path / "first" / "demo" / "provenance.yaml"
    assert provenance.read_text().startswith("# scenario=demo master_seed=5")
    assert cli.main(["-q", "run", str(provenance), "--output", str(tmp_path / "second")]) == cli.EXIT_OK
    assert ((tmp_path / "first" / "demo" / "reports.jsonl").read_bytes()
            == (tmp_path / "second" / "demo" / "reports.jsonl").read_bytes())


def test_seed_override(tmp_path):
    assert cli.main(["-q", "run", str(write_scenario(tmp_path)), "--seed", "11",
                     "--output", str(tmp_path / "out")]) == cli.EXIT_OK
    header = read_records(tmp_path / "out" / "demo" / "reports.jsonl")[0]
    assert header["master_seed"] == 11


def test_unexpected_outcomes_fail_the_run(tmp_path, capsys):
    document = dict(DEMO, checks=[{"name": "kg_residual", "expected_fail": True}],
                    output={"dump_paths": False, "export_grids": False})
    assert cli.main(["-q", "run", str(write_scenario(tmp_path, document)),
                     "--output", str(tmp_path / "out")]) == cli.EXIT_FAILED
    out = capsys.readouterr().out
    assert "MISMATCH" in out and "overall: FAILED" in out and "[FAIL]" in out
    assert not (tmp_path / "out" / "demo" / "paths.jsonl").exists()


def test_check_errors_are_recorded(tmp_path):
    document = dict(DEMO, checks=[{"name": "kg_residual"},
                                  {"name": "action_stationarity", "component": 1}])
    assert cli.main(["-q", "run", str(write_scenario(tmp_path, document)),
                     "--output", str(tmp_path / "out")]) == cli.EXIT_FAILED
    records = read_records(tmp_path / "out" / "demo" / "reports.jsonl")
    assert records[-1]["kind"] == "error" and records[-1]["name"] == "action_stationarity"
    assert records[1]["name"] == "kg_residual" and records[1]["passed"]


def test_analytic_negative_controls_builtin(tmp_path):
    assert cli.main(["-q", "run", "--builtin", "negative_control_scaled_drift",
                     "--output", str(tmp_path)]) == cli.EXIT_OK
    records = read_records(tmp_path / "negative_control_scaled_drift" / "reports.jsonl")
    assert len(records) == 1 + 6
    assert sum(r["expected_fail"] for r in records[1:]) == 5


@pytest.mark.slow
@pytest.mark.parametrize("name", sorted(BUILTIN_SCENARIOS))
def test_builtin_scenarios_pass(name, tmp_path):
    assert cli.main(["-q", "run", "--builtin", name, "--workers", "4",
                     "--output", str(tmp_path)]) == cli.EXIT_OK
