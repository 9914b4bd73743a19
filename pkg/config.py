"""
Scenario configuration for stochastic-kg runs
Section dataclasses, builtin scenarios, YAML loading, validation and serialization
"""

import copy
import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, Optional, Tuple, Union, get_args, get_origin, get_type_hints

import numpy as np
import yaml

from density import DRIFT_KINDS, Axis
from errors import ParseError, StochasticKGError, ValidationError
from spacetime import FourVector, PhysicalConstants
from stochastic import BACKWARD, FORWARD, InitialDistribution, make_tau_grid
from wavefunction import (CosineProfile, KGVolkov, LinearProfile, ModeSum, PlaneWave,
                          PlaneWavePotential, PolynomialGauge, ZeroPotential, on_shell_momentum)

# Environment variable for the default output directory
OUTPUT_ENV = "STOCHASTIC_KG_OUTPUT"
DEFAULT_OUTPUT = "./runs"

MODEL_KINDS = ("plane_wave", "mode_sum", "kg_volkov")
POTENTIAL_KINDS = ("zero", "plane_wave")
PROFILES = ("cosine", "linear")
DIRECTIONS = (FORWARD, BACKWARD)
SOURCES = ("analytic", "histogram")
FIELDS = ("constant", "coordinate", "trigonometric")

# name -> needs a simulated ensemble (density and current checks depend on `source`)
CHECK_NAMES = {
    "wiener_law": True,
    "quadratic_variation": True,
    "lorentz_invariant": True,
    "energy_constancy": True,
    "ehrenfest": True,
    "mean_velocity": True,
    "partial_integration": True,
    "action_stationarity": False,
    "kg_residual": False,
    "eom_residual": False,
    "eom_kg_relation": False,
    "curl_identity": False,
    "gauge_invariance": False,
    "fokker_planck": False,
    "continuity": False,
    "osmotic": False,
    "current_equivalence": True,
    "charge_conservation": False,
}
HISTOGRAM_CHECKS = ("fokker_planck", "continuity", "osmotic", "charge_conservation")

PROVENANCE_KEYS = ("config", "config_hash", "master_seed", "version")

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class ConstantsConfig:
    hbar: float = 1.0
    m0: float = 1.0
    e: float = 1.0
    c: float = 1.0
    mu0: float = 1.0


@dataclass(frozen=True)
class ModeConfig:
    weight: Tuple[float, float] = (1.0, 0.0)
    momentum: Optional[Tuple[float, float, float]] = None
    four_momentum: Optional[Tuple[float, float, float, float]] = None


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "plane_wave"
    momentum: Optional[Tuple[float, float, float]] = None
    four_momentum: Optional[Tuple[float, float, float, float]] = None
    modes: Tuple[ModeConfig, ...] = ()
    allow_off_shell: bool = False


@dataclass(frozen=True)
class PotentialConfig:
    kind: str = "zero"
    k: Tuple[float, float, float, float] = (1.0, 0.0, 0.0, 1.0)
    polarization: Tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    profile: str = "cosine"
    phase: float = 0.0


@dataclass(frozen=True)
class GaugeConfig:
    constant: float = 0.0
    linear: Tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    quadratic: Tuple[Tuple[float, ...], ...] = ((0.0,) * 4,) * 4


@dataclass(frozen=True)
class InitialConfig:
    kind: str = "point"
    point: Tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    low: Tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    high: Tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    active: Tuple[int, ...] = (0, 3)


@dataclass(frozen=True)
class SimulationConfig:
    n_paths: int = 1000
    tau_start: float = 0.0
    tau_end: float = 1.0
    dtau: float = 0.01
    master_seed: int = 0
    direction: str = FORWARD
    substeps: int = 1
    brownian_refinement: int = 1
    noise_scale: float = 1.0
    drift_scale: float = 1.0
    initial: InitialConfig = field(default_factory=InitialConfig)


@dataclass(frozen=True)
class AxisConfig:
    index: int = 3
    low: float = 0.0
    high: float = 1.0
    n_bins: int = 16
    periodic: bool = False


@dataclass(frozen=True)
class GridConfig:
    """Histogram axes, analytic-grid resolution and the pointwise sampling box"""
    axes: Tuple[AxisConfig, ...] = (
        AxisConfig(index=0, low=0.0, high=TWO_PI, n_bins=8, periodic=True),
        AxisConfig(index=3, low=0.0, high=math.pi, n_bins=8, periodic=True),
    )
    analytic_bins: Optional[Tuple[int, ...]] = None
    fixed: Tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    tau_values: Tuple[float, ...] = (0.0, 0.5, 1.0)
    n_points: int = 20
    points_low: Tuple[float, float, float, float] = (-1.0, -1.0, -1.0, -1.0)
    points_high: Tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)


@dataclass(frozen=True)
class CheckSpec:
    name: str = "kg_residual"
    label: Optional[str] = None
    expected_fail: bool = False
    source: str = "analytic"
    n_se: float = 3.0
    tolerance: Optional[float] = None
    stride: int = 1
    drift_kind: Optional[str] = None
    drift_scale: float = 1.0
    lam_scale: float = 1.0
    field: str = "trigonometric"
    epsilon_max: float = 0.01
    amplitude: float = 0.1
    component: int = 3
    harmonic: int = 1
    force_scale: float = 1.0
    pooled: bool = False

    @property
    def report_name(self) -> str:
        return self.label or self.name


@dataclass(frozen=True)
class OutputConfig:
    directory: Optional[str] = None
    dump_paths: bool = False
    export_grids: bool = False


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str = "custom"
    description: str = ""
    constants: ConstantsConfig = field(default_factory=ConstantsConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    potential: PotentialConfig = field(default_factory=PotentialConfig)
    gauge: GaugeConfig = field(default_factory=GaugeConfig)
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    checks: Tuple[CheckSpec, ...] = ()
    output: OutputConfig = field(default_factory=OutputConfig)


# ---------------------------------------------------------------------------
# Builtin scenarios (raw documents, deep-merged under user keys)
# ---------------------------------------------------------------------------

SAMPLE_GAUGE = {
    "constant": 0.3,
    "linear": [0.2, -0.1, 0.05, 0.4],
    "quadratic": [[0.1, 0.02, 0.0, 0.03],
                  [0.02, -0.05, 0.0, 0.0],
                  [0.0, 0.0, 0.04, 0.0],
                  [0.03, 0.0, 0.0, 0.07]],
}

TORUS_T_Z = [
    {"index": 0, "low": 0.0, "high": TWO_PI, "n_bins": 8, "periodic": True},
    {"index": 3, "low": 0.0, "high": math.pi, "n_bins": 8, "periodic": True},
]

MODE_SUM_AXES = [
    {"index": 0, "low": 0.0, "high": TWO_PI, "n_bins": 4, "periodic": True},
    {"index": 3, "low": 0.0, "high": math.pi, "n_bins": 32, "periodic": True},
]

POINTWISE = [{"name": "kg_residual"}, {"name": "eom_residual"}, {"name": "curl_identity"},
             {"name": "gauge_invariance"}]

BUILTIN_SCENARIOS: Dict[str, dict] = {
    "plane_wave": {
        "scenario": "plane_wave",
        "description": "free plane wave on a (t, z) torus; exact identities and Wiener law",
        "model": {"kind": "plane_wave", "momentum": [0.0, 0.0, 1.0]},
        "gauge": SAMPLE_GAUGE,
        "simulation": {
            "n_paths": 10000, "tau_start": 0.0, "tau_end": 10.0, "dtau": 0.05,
            "master_seed": 20240601,
            "initial": {"kind": "box", "low": [0.0, 0.0, 0.0, 0.0],
                        "high": [TWO_PI, 0.0, 0.0, math.pi]},
        },
        "grid": {"axes": TORUS_T_Z, "analytic_bins": [16, 16], "tau_values": [0.0, 0.5, 1.0],
                 "points_low": [-2.0, -2.0, -2.0, -2.0], "points_high": [2.0, 2.0, 2.0, 2.0]},
        "checks": [
            {"name": "wiener_law"},
            {"name": "quadratic_variation"},
            {"name": "lorentz_invariant"},
            {"name": "energy_constancy"},
            {"name": "ehrenfest", "stride": 4},
            {"name": "mean_velocity"},
            {"name": "partial_integration", "field": "constant",
             "label": "partial_integration_constant"},
            {"name": "partial_integration", "field": "coordinate",
             "label": "partial_integration_coordinate"},
            {"name": "partial_integration", "field": "trigonometric",
             "label": "partial_integration_trigonometric"},
            {"name": "action_stationarity"},
            *POINTWISE,
            {"name": "fokker_planck"},
            {"name": "continuity"},
            {"name": "osmotic"},
            {"name": "fokker_planck", "source": "histogram", "label": "fokker_planck_histogram"},
            {"name": "osmotic", "source": "histogram", "pooled": True, "label": "osmotic_histogram"},
            {"name": "current_equivalence", "tolerance": 0.02},
            {"name": "charge_conservation"},
            {"name": "charge_conservation", "source": "histogram",
             "label": "charge_conservation_histogram"},
        ],
    },
    "mode_sum_stationary": {
        "scenario": "mode_sum_stationary",
        "description": "two counter-propagating modes; stationary law 1.25 + cos 2z, Monte Carlo density checks",
        "model": {"kind": "mode_sum", "modes": [
            {"weight": [1.0, 0.0], "momentum": [0.0, 0.0, 1.0]},
            {"weight": [0.5, 0.0], "momentum": [0.0, 0.0, -1.0]},
        ]},
        "gauge": SAMPLE_GAUGE,
        "simulation": {
            "n_paths": 20000, "tau_start": 0.0, "tau_end": 5.0, "dtau": 0.05, "substeps": 10,
            "master_seed": 20240602,
            "initial": {"kind": "density", "low": [0.0, 0.0, 0.0, 0.0],
                        "high": [TWO_PI, 0.0, 0.0, math.pi]},
        },
        "grid": {"axes": MODE_SUM_AXES, "analytic_bins": [4, 1256],
                 "points_low": [-2.0, -2.0, -2.0, -2.0], "points_high": [2.0, 2.0, 2.0, 2.0]},
        "checks": [
            {"name": "lorentz_invariant"},
            {"name": "energy_constancy"},
            {"name": "ehrenfest", "stride": 4},
            {"name": "mean_velocity"},
            {"name": "partial_integration", "field": "constant",
             "label": "partial_integration_constant"},
            {"name": "partial_integration", "field": "trigonometric",
             "label": "partial_integration_trigonometric"},
            {"name": "action_stationarity"},
            *POINTWISE,
            {"name": "fokker_planck"},
            {"name": "continuity"},
            {"name": "osmotic"},
            {"name": "fokker_planck", "source": "histogram", "label": "fokker_planck_histogram"},
            {"name": "continuity", "source": "histogram", "label": "continuity_histogram"},
            {"name": "osmotic", "source": "histogram", "pooled": True, "label": "osmotic_histogram"},
            {"name": "current_equivalence", "tolerance": 0.05},
            {"name": "charge_conservation"},
            {"name": "charge_conservation", "source": "histogram",
             "label": "charge_conservation_histogram"},
        ],
    },
    "volkov_plane_wave_field": {
        "scenario": "volkov_plane_wave_field",
        "description": "Volkov state in a linearly polarized laser; Ehrenfest with Lorentz force",
        "constants": {"hbar": 0.0025},
        "model": {"kind": "kg_volkov", "four_momentum": [1.0, 0.0, 0.0, 0.0]},
        "potential": {"kind": "plane_wave", "k": [1.0, 0.0, 0.0, 1.0],
                      "polarization": [0.0, 0.5, 0.0, 0.0], "profile": "cosine"},
        "gauge": SAMPLE_GAUGE,
        "simulation": {
            "n_paths": 4000, "tau_start": 0.0, "tau_end": 2.0, "dtau": 0.01,
            "master_seed": 20240603, "initial": {"kind": "point"},
        },
        "grid": {"axes": [
            {"index": 0, "low": 0.0, "high": TWO_PI, "n_bins": 64, "periodic": True},
            {"index": 3, "low": 0.0, "high": TWO_PI, "n_bins": 64, "periodic": True},
        ], "points_low": [-2.0, -2.0, -2.0, -2.0], "points_high": [2.0, 2.0, 2.0, 2.0]},
        "checks": [
            {"name": "lorentz_invariant"},
            {"name": "energy_constancy"},
            {"name": "ehrenfest", "stride": 10},
            {"name": "ehrenfest", "stride": 10, "force_scale": 0.0, "expected_fail": True,
             "label": "ehrenfest_without_force"},
            {"name": "action_stationarity", "harmonic": 2},
            *POINTWISE,
            {"name": "fokker_planck"},
            {"name": "continuity"},
            {"name": "charge_conservation"},
        ],
    },
    "negative_control_offshell": {
        "scenario": "negative_control_offshell",
        "description": "off-shell mode sum; KG, EOM, action and Lorentz checks must fail",
        "model": {"kind": "mode_sum", "allow_off_shell": True, "modes": [
            {"weight": [1.0, 0.0], "four_momentum": [math.sqrt(2.5), 0.0, 0.0, 1.5]},
            {"weight": [0.5, 0.0], "four_momentum": [math.sqrt(2.5), 0.0, 0.0, -0.5]},
        ]},
        "simulation": {
            "n_paths": 1000, "tau_start": 0.0, "tau_end": 1.0, "dtau": 0.01,
            "master_seed": 20240604,
            "initial": {"kind": "density", "low": [0.0, 0.0, 0.0, 0.0],
                        "high": [TWO_PI, 0.0, 0.0, math.pi]},
        },
        "grid": {"axes": MODE_SUM_AXES, "analytic_bins": [4, 256],
                 "points_low": [-2.0, -2.0, -2.0, -2.0], "points_high": [2.0, 2.0, 2.0, 2.0]},
        "checks": [
            {"name": "kg_residual", "expected_fail": True},
            {"name": "eom_residual", "expected_fail": True},
            {"name": "eom_kg_relation"},
            {"name": "action_stationarity", "expected_fail": True},
            {"name": "lorentz_invariant", "expected_fail": True},
        ],
    },
    "negative_control_scaled_drift": {
        "scenario": "negative_control_scaled_drift",
        "description": "stationary mode sum with scaled drift or noise; density residuals must fail",
        "model": {"kind": "mode_sum", "modes": [
            {"weight": [1.0, 0.0], "momentum": [0.0, 0.0, 1.0]},
            {"weight": [0.5, 0.0], "momentum": [0.0, 0.0, -1.0]},
        ]},
        "simulation": {"n_paths": 1, "master_seed": 20240605},
        "grid": {"axes": MODE_SUM_AXES, "analytic_bins": [4, 1256]},
        "checks": [
            {"name": "fokker_planck", "label": "fokker_planck_reference"},
            {"name": "fokker_planck", "drift_scale": 2.0, "expected_fail": True,
             "label": "fokker_planck_drift_x2"},
            {"name": "fokker_planck", "lam_scale": 2.0, "expected_fail": True,
             "label": "fokker_planck_lambda_x2"},
            {"name": "continuity", "drift_kind": "vplus", "drift_scale": 2.0,
             "expected_fail": True, "label": "continuity_vplus_x2"},
            {"name": "osmotic", "lam_scale": 2.0, "expected_fail": True,
             "label": "osmotic_lambda_x2"},
            {"name": "osmotic", "drift_scale": 2.0, "expected_fail": True,
             "label": "osmotic_drift_x2"},
        ],
    },
    "negative_control_doubled_drift": {
        "scenario": "negative_control_doubled_drift",
        "description": "stationary mode sum integrated with twice the drift; current and velocity checks fail",
        "model": {"kind": "mode_sum", "modes": [
            {"weight": [1.0, 0.0], "momentum": [0.0, 0.0, 1.0]},
            {"weight": [0.5, 0.0], "momentum": [0.0, 0.0, -1.0]},
        ]},
        "simulation": {
            "n_paths": 4000, "tau_start": 0.0, "tau_end": 4.0, "dtau": 0.05, "substeps": 5,
            "drift_scale": 2.0, "master_seed": 20240606,
            "initial": {"kind": "density", "low": [0.0, 0.0, 0.0, 0.0],
                        "high": [TWO_PI, 0.0, 0.0, math.pi]},
        },
        "grid": {"axes": MODE_SUM_AXES},
        "checks": [
            {"name": "mean_velocity", "expected_fail": True, "label": "mean_velocity_drift_x2"},
            {"name": "current_equivalence", "tolerance": 0.05, "expected_fail": True,
             "label": "current_equivalence_drift_x2"},
        ],
    },
}

SCENARIO_NOTES = {
    "plane_wave": "Wiener law, Lorentz invariant, Ehrenfest, partial integration, gauge, currents",
    "mode_sum_stationary": "Fokker-Planck, continuity, osmotic, current equivalence, energy",
    "volkov_plane_wave_field": "Ehrenfest with and without the force, Lorentz invariant, EOM, action",
    "negative_control_offshell": "KG and EOM residuals, action, Lorentz invariant (expected to fail)",
    "negative_control_scaled_drift": "Fokker-Planck, continuity, osmotic (expected to fail)",
    "negative_control_doubled_drift": "current equivalence, mean velocity (expected to fail)",
}


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

def _key_lines(node, prefix: str = "", out: Optional[dict] = None) -> dict:
    """dotted key path -> 1-based line, from a composed YAML node"""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            path = f"{prefix}.{key_node.value}" if prefix else str(key_node.value)
            out[path] = key_node.start_mark.line + 1
            _key_lines(value_node, path, out)
    elif isinstance(node, yaml.SequenceNode):
        for index, item in enumerate(node.value):
            path = f"{prefix}[{index}]"
            out[path] = item.start_mark.line + 1
            _key_lines(item, path, out)
    return out


def _coerce(value, hint, path: str, lines: dict):
    origin, args = get_origin(hint), get_args(hint)
    if origin is Union:
        if value is None:
            return None
        inner = next(a for a in args if a is not type(None))
        return _coerce(value, inner, path, lines)
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, path, lines)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ValidationError(path, "expected a list")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], f"{path}[{i}]", lines) for i, v in enumerate(value))
        if len(value) != len(args):
            raise ValidationError(path, f"expected {len(args)} entries, got {len(value)}")
        return tuple(_coerce(v, a, f"{path}[{i}]", lines)
                     for i, (v, a) in enumerate(zip(value, args)))
    if hint is bool:
        if not isinstance(value, bool):
            raise ValidationError(path, f"expected true or false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValidationError(path, f"expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                raise ValidationError(path, f"expected a number, got {value!r}") from None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(path, f"expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ValidationError(path, f"expected a string, got {value!r}")
        return value
    raise TypeError(f"unsupported schema type {hint!r}")


def _build(cls, data, path: str, lines: dict):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ValidationError(path or "config", "expected a mapping")
    names = {f.name for f in fields(cls)}
    for key in data:
        dotted = f"{path}.{key}" if path else str(key)
        if key not in names:
            raise ParseError(f"unknown key {dotted!r}", lines.get(dotted))
    hints = get_type_hints(cls)
    kwargs = {}
    for name in names:
        if name in data:
            dotted = f"{path}.{name}" if path else name
            kwargs[name] = _coerce(data[name], hints[name], dotted, lines)
    return cls(**kwargs)


def deep_merge(base: dict, override: dict) -> dict:
    """Recursive dict merge; lists and scalars in `override` replace"""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _read_source(source: Union[str, Path]) -> str:
    if isinstance(source, Path):
        return source.read_text(encoding="utf-8")
    if "\n" not in source and source.strip() and os.path.isfile(source):
        return Path(source).read_text(encoding="utf-8")
    return source


def _parse(text: str) -> Tuple[dict, dict]:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ParseError(f"malformed YAML: {exc}", mark.line + 1 if mark else None) from None
    if raw is None:
        return {}, {}
    if not isinstance(raw, dict):
        raise ParseError("scenario document must be a mapping", 1)
    return raw, _key_lines(node)


def load_config(source: Union[str, Path]) -> ScenarioConfig:
    """Validated ScenarioConfig from a YAML file path, YAML text or a provenance document"""
    raw, lines = _parse(_read_source(source))
    if "config" in raw or "config_hash" in raw:
        return _from_provenance(raw, lines)
    scenario = raw.get("scenario", "custom")
    base = BUILTIN_SCENARIOS.get(scenario, {}) if isinstance(scenario, str) else {}
    return validate(_build(ScenarioConfig, deep_merge(base, raw), "", lines))


def _from_provenance(raw: dict, lines: dict) -> ScenarioConfig:
    for key in raw:
        if key not in PROVENANCE_KEYS:
            raise ParseError(f"unknown key {key!r}", lines.get(str(key)))
    if "config" not in raw or "config_hash" not in raw:
        raise ValidationError("config_hash", "provenance documents need both config and config_hash")
    nested = {k[len("config."):]: v for k, v in lines.items() if k.startswith("config.")}
    config = validate(_build(ScenarioConfig, raw["config"], "", nested))
    if config_hash(config) != raw["config_hash"]:
        raise ValidationError("config_hash", "does not match the embedded config")
    return config


def builtin_config(scenario: str) -> ScenarioConfig:
    if scenario not in BUILTIN_SCENARIOS:
        raise ValidationError("scenario", f"unknown builtin scenario {scenario!r}")
    return validate(_build(ScenarioConfig, copy.deepcopy(BUILTIN_SCENARIOS[scenario]), "", {}))


# ---------------------------------------------------------------------------
# Validation and construction of library objects
# ---------------------------------------------------------------------------

def build_constants(config: ScenarioConfig) -> PhysicalConstants:
    c = config.constants
    try:
        return PhysicalConstants(hbar=c.hbar, m0=c.m0, e=c.e, c=c.c, mu0=c.mu0)
    except ValueError as exc:
        raise ValidationError("constants", str(exc)) from None


def build_potential(config: ScenarioConfig):
    p = config.potential
    if p.kind == "zero":
        return ZeroPotential()
    if p.kind != "plane_wave":
        raise ValidationError("potential.kind", f"must be one of {POTENTIAL_KINDS}")
    if p.profile not in PROFILES:
        raise ValidationError("potential.profile", f"must be one of {PROFILES}")
    profile = CosineProfile(p.phase) if p.profile == "cosine" else LinearProfile()
    try:
        return PlaneWavePotential(FourVector(*p.k), FourVector(*p.polarization), profile)
    except ValueError as exc:
        raise ValidationError("potential", str(exc)) from None


def _four_momentum(momentum, four_momentum, consts, path):
    if four_momentum is not None:
        if momentum is not None and tuple(four_momentum[1:]) != tuple(momentum):
            raise ValidationError(f"{path}.four_momentum", "spatial part disagrees with momentum")
        return FourVector(*four_momentum)
    return on_shell_momentum(momentum if momentum is not None else (0.0, 0.0, 0.0), consts)


def build_model(config: ScenarioConfig, potential=None):
    """Wave function model; on-shell momenta are enforced unless allow_off_shell"""
    m = config.model
    consts = build_constants(config)
    potential = build_potential(config) if potential is None else potential
    if m.kind not in MODEL_KINDS:
        raise ValidationError("model.kind", f"must be one of {MODEL_KINDS}")
    try:
        if m.kind == "mode_sum":
            if not m.modes:
                raise ValidationError("model.modes", "mode_sum needs at least one mode")
            modes = tuple(
                (complex(*mode.weight),
                 _four_momentum(mode.momentum, mode.four_momentum, consts, f"model.modes[{i}]"))
                for i, mode in enumerate(m.modes))
            model = ModeSum(modes, consts, m.allow_off_shell)
        else:
            p = _four_momentum(m.momentum, m.four_momentum, consts, "model")
            if m.kind == "plane_wave":
                model = PlaneWave(p, consts, m.allow_off_shell)
            elif not isinstance(potential, PlaneWavePotential):
                raise ValidationError("potential.kind", "kg_volkov needs a plane_wave potential")
            else:
                model = KGVolkov(p, potential, consts)
    except StochasticKGError as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError("model.four_momentum", str(exc)) from None
    except ValueError as exc:
        raise ValidationError("model", str(exc)) from None
    if m.kind != "kg_volkov" and not isinstance(potential, ZeroPotential):
        raise ValidationError("potential.kind", f"{m.kind} solves the free equation; use zero")
    return model


def build_gauge(config: ScenarioConfig) -> PolynomialGauge:
    g = config.gauge
    try:
        return PolynomialGauge(g.constant, g.linear, g.quadratic)
    except ValueError as exc:
        raise ValidationError("gauge.quadratic", str(exc)) from None


def build_initial(config: ScenarioConfig) -> InitialDistribution:
    i = config.simulation.initial
    try:
        return InitialDistribution(i.kind, i.point, i.low, i.high, i.active)
    except ValueError as exc:
        raise ValidationError("simulation.initial", str(exc)) from None


def build_axes(config: ScenarioConfig, analytic: bool = False) -> Tuple[Axis, ...]:
    axes = config.grid.axes
    bins = config.grid.analytic_bins if analytic else None
    if bins is not None and len(bins) != len(axes):
        raise ValidationError("grid.analytic_bins", "needs one entry per axis")
    try:
        return tuple(Axis(a.index, a.low, a.high, bins[i] if bins else a.n_bins, a.periodic)
                     for i, a in enumerate(axes))
    except ValueError as exc:
        raise ValidationError("grid.axes", str(exc)) from None


def build_tau_grid(config: ScenarioConfig) -> np.ndarray:
    s = config.simulation
    try:
        return make_tau_grid(s.tau_start, s.tau_end, s.dtau)
    except ValueError as exc:
        raise ValidationError("simulation.dtau", str(exc)) from None


def _fill_momenta(config: ScenarioConfig, model) -> ScenarioConfig:
    m = config.model
    if isinstance(model, ModeSum):
        modes = tuple(dataclasses.replace(mode, four_momentum=tuple(p.as_array().tolist()))
                      for mode, (_, p) in zip(m.modes, model.modes))
        return dataclasses.replace(config, model=dataclasses.replace(m, modes=modes))
    return dataclasses.replace(
        config, model=dataclasses.replace(m, four_momentum=tuple(model.p.as_array().tolist())))


def validate(config: ScenarioConfig) -> ScenarioConfig:
    """Range and consistency checks; returns the config with four-momenta filled in"""
    s = config.simulation
    if s.n_paths < 1:
        raise ValidationError("simulation.n_paths", "must be at least 1")
    if not s.dtau > 0.0:
        raise ValidationError("simulation.dtau", "must be positive")
    if s.direction not in DIRECTIONS:
        raise ValidationError("simulation.direction", f"must be one of {DIRECTIONS}")
    if s.substeps < 1 or s.brownian_refinement < 1:
        raise ValidationError("simulation.substeps", "substeps and brownian_refinement must be >= 1")
    if s.master_seed < 0:
        raise ValidationError("simulation.master_seed", "must be non-negative")
    if config.grid.n_points < 1:
        raise ValidationError("grid.n_points", "must be at least 1")
    build_tau_grid(config)
    build_initial(config)
    build_axes(config)
    build_axes(config, analytic=True)
    build_gauge(config)
    model = build_model(config)

    labels = set()
    for index, check in enumerate(config.checks):
        path = f"checks[{index}]"
        if check.name not in CHECK_NAMES:
            raise ValidationError(f"{path}.name", f"unknown check {check.name!r}")
        if check.source not in SOURCES:
            raise ValidationError(f"{path}.source", f"must be one of {SOURCES}")
        if check.source == "histogram" and check.name not in HISTOGRAM_CHECKS:
            raise ValidationError(f"{path}.source", f"{check.name} has no histogram form")
        if check.field not in FIELDS:
            raise ValidationError(f"{path}.field", f"must be one of {FIELDS}")
        if check.drift_kind is not None and check.drift_kind not in DRIFT_KINDS:
            raise ValidationError(f"{path}.drift_kind", f"must be one of {DRIFT_KINDS}")
        if check.stride < 1 or check.n_se <= 0.0:
            raise ValidationError(f"{path}.stride", "stride and n_se must be positive")
        if check.component not in (0, 1, 2, 3) or check.harmonic < 1:
            raise ValidationError(f"{path}.component", "component must be 0..3 and harmonic >= 1")
        if check.pooled and (check.name != "osmotic" or check.source != "histogram"):
            raise ValidationError(f"{path}.pooled", "only the osmotic histogram check pools tau slices")
        if check.force_scale != 1.0 and check.name != "ehrenfest":
            raise ValidationError(f"{path}.force_scale", "force_scale applies to the ehrenfest check only")
        if check.report_name in labels:
            raise ValidationError(f"{path}.label", f"duplicate report name {check.report_name!r}")
        labels.add(check.report_name)
    return _fill_momenta(config, model)


def needs_ensemble(config: ScenarioConfig) -> bool:
    return any(CHECK_NAMES[c.name] or c.source == "histogram" for c in config.checks)


def with_seed(config: ScenarioConfig, seed: int) -> ScenarioConfig:
    return validate(dataclasses.replace(
        config, simulation=dataclasses.replace(config.simulation, master_seed=int(seed))))


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def to_dict(config: ScenarioConfig) -> dict:
    return _plain(dataclasses.asdict(config))


def serialize(config: ScenarioConfig) -> str:
    return yaml.safe_dump(to_dict(config), sort_keys=False, default_flow_style=None)


def config_hash(config: ScenarioConfig) -> str:
    canonical = json.dumps(to_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def output_directory(config: ScenarioConfig, override: Optional[str] = None) -> Path:
    """--output, then output.directory, then $STOCHASTIC_KG_OUTPUT, then ./runs; one subdirectory per scenario"""
    root = override or config.output.directory or os.getenv(OUTPUT_ENV, DEFAULT_OUTPUT)
    return Path(root) / config.scenario


def _type_name(hint) -> str:
    origin, args = get_origin(hint), get_args(hint)
    if origin is Union:
        return "optional " + _type_name(next(a for a in args if a is not type(None)))
    if dataclasses.is_dataclass(hint):
        return hint.__name__
    if origin is tuple:
        if len(args) == 2 and args[1] is Ellipsis:
            return f"list of {_type_name(args[0])}"
        return f"list of {len(args)} {_type_name(args[0])}"
    return hint.__name__


def schema(cls=ScenarioConfig) -> dict:
    """Field types and defaults of every section, nested"""
    out = {}
    hints = get_type_hints(cls)
    for f in fields(cls):
        hint = hints[f.name]
        inner = hint
        if get_origin(hint) is tuple and get_args(hint)[-1] is Ellipsis:
            inner = get_args(hint)[0]
        if dataclasses.is_dataclass(inner):
            out[f.name] = {"type": _type_name(hint), "fields": schema(inner)}
            continue
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        out[f.name] = {"type": _type_name(hint), "default": _plain(default)}
    return out


def dump_schema() -> str:
    document = {"sections": schema(), "checks": sorted(CHECK_NAMES),
                "builtin_scenarios": sorted(BUILTIN_SCENARIOS),
                "environment": {OUTPUT_ENV: f"default output directory ({DEFAULT_OUTPUT})"}}
    return yaml.safe_dump(document, sort_keys=False, default_flow_style=None)
