from pathlib import Path

import pytest
import yaml

from config import (BUILTIN_SCENARIOS, CHECK_NAMES, DEFAULT_OUTPUT, OUTPUT_ENV, build_axes,
                    build_model, builtin_config, config_hash, deep_merge, dump_schema,
                    load_config, needs_ensemble, output_directory, serialize, to_dict, with_seed)
from errors import ConfigError, ParseError, ValidationError


@pytest.mark.parametrize("name", sorted(BUILTIN_SCENARIOS))
def test_builtin_scenarios_validate(name):
    config = builtin_config(name)
    assert config.scenario == name
    assert config.checks
    build_model(config)


def test_builtin_hash_is_stable():
    first = config_hash(builtin_config("plane_wave"))
    assert first == config_hash(builtin_config("plane_wave"))
    assert len(first) == 64
    assert first != config_hash(builtin_config("mode_sum_stationary"))


@pytest.mark.parametrize("name", ["plane_wave", "volkov_plane_wave_field", "negative_control_offshell"])
def test_serialized_config_loads_back(name):
    config = builtin_config(name)
    again = load_config(serialize(config))
    assert again == config
    assert config_hash(again) == config_hash(config)


def test_momenta_are_filled_in():
    config = builtin_config("mode_sum_stationary")
    first = config.model.modes[0]
    assert first.four_momentum[0] == pytest.approx(2.0 ** 0.5)
    assert first.four_momentum[1:] == first.momentum


def test_unknown_key_reports_its_line():
    text = "scenario: custom\nsimulation:\n  n_pathz: 10\n"
    with pytest.raises(ParseError) as info:
        load_config(text)
    assert info.value.line == 3
    assert "simulation.n_pathz" in str(info.value)


def test_malformed_documents_are_parse_errors():
    with pytest.raises(ParseError):
        load_config("simulation: [1, 2\n")
    with pytest.raises(ParseError):
        load_config("- 1\n- 2\n")


def test_off_shell_momentum_is_rejected():
    text = "model:\n  kind: plane_wave\n  four_momentum: [2.0, 0.0, 0.0, 1.0]\n"
    with pytest.raises(ValidationError) as info:
        load_config(text)
    assert info.value.field.startswith("model")
    allowed = load_config(text + "  allow_off_shell: true\n")
    assert allowed.model.four_momentum == (2.0, 0.0, 0.0, 1.0)


def test_momentum_and_four_momentum_must_agree():
    text = "model:\n  kind: plane_wave\n  momentum: [0.0, 0.0, 1.0]\n  four_momentum: [1.5, 0.0, 0.0, 0.5]\n"
    with pytest.raises(ValidationError) as info:
        load_config(text)
    assert info.value.field == "model.four_momentum"


@pytest.mark.parametrize("text, field", [
    ("simulation:\n  n_paths: 0\n", "simulation.n_paths"),
    ("simulation:\n  dtau: 0.3\n", "simulation.dtau"),
    ("simulation:\n  direction: sideways\n", "simulation.direction"),
    ("checks:\n  - name: kg_residual\n  - name: kg_residual\n", "checks[1].label"),
    ("checks:\n  - name: kg_residual\n    source: histogram\n", "checks[0].source"),
    ("checks:\n  - name: telepathy\n", "checks[0].name"),
    ("output:\n  dump_paths: 1\n", "output.dump_paths"),
    ("grid:\n  analytic_bins: [8]\n", "grid.analytic_bins"),
    ("model:\n  kind: mode_sum\n", "model.modes"),
    ("checks:\n  - name: fokker_planck\n    pooled: true\n", "checks[0].pooled"),
    ("checks:\n  - name: lorentz_invariant\n    force_scale: 0.0\n", "checks[0].force_scale"),
])
def test_validation_errors_name_the_field(text, field):
    with pytest.raises(ValidationError) as info:
        load_config(text)
    assert info.value.field == field
    assert isinstance(info.value, ConfigError)


def test_labels_make_repeated_checks_distinct():
    config = load_config("checks:\n  - name: kg_residual\n  - name: kg_residual\n    label: again\n")
    assert [c.report_name for c in config.checks] == ["kg_residual", "again"]


def test_numeric_strings_are_accepted_for_floats():
    config = load_config("simulation:\n  dtau: '0.05'\n  tau_end: 1\n")
    assert config.simulation.dtau == 0.05
    assert isinstance(config.simulation.tau_end, float)


def test_user_keys_merge_over_a_builtin():
    config = load_config("scenario: plane_wave\nsimulation:\n  n_paths: 10\n")
    reference = builtin_config("plane_wave")
    assert config.simulation.n_paths == 10
    assert config.simulation.master_seed == reference.simulation.master_seed
    assert config.checks == reference.checks


def test_load_from_a_file(tmp_path):
    target = tmp_path / "scenario.yaml"
    target.write_text("scenario: demo\nsimulation:\n  n_paths: 3\n")
    assert load_config(target).simulation.n_paths == 3
    assert load_config(str(target)).scenario == "demo"


def test_provenance_documents_reproduce_the_config():
    config = builtin_config("volkov_plane_wave_field")
    document = {"config": to_dict(config), "config_hash": config_hash(config),
                "master_seed": config.simulation.master_seed, "version": "1.0.0"}
    assert load_config(yaml.safe_dump(document)) == config
    document["config_hash"] = "0" * 64
    with pytest.raises(ValidationError) as info:
        load_config(yaml.safe_dump(document))
    assert info.value.field == "config_hash"


def test_with_seed_changes_the_hash():
    config = builtin_config("plane_wave")
    seeded = with_seed(config, 99)
    assert seeded.simulation.master_seed == 99
    assert config_hash(seeded) != config_hash(config)


def test_output_directory_precedence(monkeypatch, tmp_path):
    config = builtin_config("plane_wave")
    monkeypatch.delenv(OUTPUT_ENV, raising=False)
    assert output_directory(config) == Path(DEFAULT_OUTPUT) / "plane_wave"
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "env"))
    assert output_directory(config) == tmp_path / "env" / "plane_wave"
    configured = load_config(f"scenario: plane_wave\noutput:\n  directory: {tmp_path / 'cfg'}\n")
    assert output_directory(configured) == tmp_path / "cfg" / "plane_wave"
    assert output_directory(configured, str(tmp_path / "cli")) == tmp_path / "cli" / "plane_wave"


def test_schema_lists_sections_and_checks():
    document = yaml.safe_load(dump_schema())
    assert set(document["checks"]) == set(CHECK_NAMES)
    assert document["builtin_scenarios"] == sorted(BUILTIN_SCENARIOS)
    simulation = document["sections"]["simulation"]["fields"]
    assert simulation["n_paths"]["default"] == 1000
    assert OUTPUT_ENV in document["environment"]


def test_deep_merge_leaves_inputs_untouched():
    base = {"a": {"b": 1, "c": [1, 2]}, "d": 1}
    merged = deep_merge(base, {"a": {"c": [3]}, "e": 2})
    assert merged == {"a": {"b": 1, "c": [3]}, "d": 1, "e": 2}
    assert base == {"a": {"b": 1, "c": [1, 2]}, "d": 1}


def test_ensemble_need_follows_the_checks():
    assert needs_ensemble(builtin_config("plane_wave"))
    assert not needs_ensemble(builtin_config("negative_control_scaled_drift"))
    assert needs_ensemble(load_config("checks:\n  - name: osmotic\n    source: histogram\n"))


def test_analytic_bins_override_the_histogram_bins():
    config = builtin_config("mode_sum_stationary")
    assert [a.n_bins for a in build_axes(config)] == [4, 32]
    assert [a.n_bins for a in build_axes(config, analytic=True)] == [4, 1256]


def test_unknown_builtin():
    with pytest.raises(ValidationError):
        builtin_config("nope")


@pytest.mark.parametrize("name", ["plane_wave", "mode_sum_stationary"])
def test_histogram_builtins_draw_a_million_samples(name):
    config = builtin_config(name)
    s = config.simulation
    n_slices = round((s.tau_end - s.tau_start) / s.dtau) + 1
    assert s.n_paths * n_slices >= 10 ** 6
    osmotic = next(c for c in config.checks if c.report_name == "osmotic_histogram")
    assert osmotic.pooled
