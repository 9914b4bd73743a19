#!/usr/bin/env python3
"""
Command-line tool for stochastic Klein-Gordon scenarios
Lists builtin scenarios, runs a scenario into an artifact directory, dumps the config schema
"""

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import yaml

import checks
from config import (BUILTIN_SCENARIOS, SCENARIO_NOTES, CheckSpec, ScenarioConfig, build_axes,
                    build_constants, build_gauge, build_initial, build_model, build_potential,
                    build_tau_grid, builtin_config, config_hash, dump_schema, load_config,
                    needs_ensemble, output_directory, to_dict, with_seed)
from density import (Axes, analytic_density, estimate_density, export_density_csv,
                     export_grid_csv)
from errors import ConfigError, StochasticKGError
from stochastic import (FORWARD, POINT_STREAM, PathEnsemble, RngStream, dump_paths,
                        simulate_backward, simulate_forward)

VERSION = "1.0.0"

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2

# Constant test fields for the partial-integration check
CONSTANT_ALPHA = (1.0 + 0.5j, 0.3, -0.2j, 0.7)
CONSTANT_BETA = (0.4, -1.0 + 0.1j, 0.25, 0.5j)

log = logging.getLogger("stochastic_kg.cli")


@dataclass
class RunContext:
    """Everything a check runner needs, built once per scenario"""
    config: ScenarioConfig
    consts: object
    model: object
    potential: object
    axes: Axes
    analytic_axes: Axes
    ensemble: Optional[PathEnsemble] = None
    cache: Dict[str, object] = field(default_factory=dict)

    @property
    def seed(self) -> int:
        return self.config.simulation.master_seed

    @property
    def fixed(self):
        return self.config.grid.fixed

    def require_ensemble(self) -> PathEnsemble:
        if self.ensemble is None:
            raise StochasticKGError("this check needs a simulated ensemble")
        return self.ensemble

    def points(self) -> np.ndarray:
        if "points" not in self.cache:
            g = self.config.grid
            self.cache["points"] = checks.random_points(self.seed, g.points_low, g.points_high,
                                                        g.n_points)
        return self.cache["points"]

    def stochastic_current(self):
        if "j_stochastic" not in self.cache:
            self.cache["j_stochastic"] = checks.compute_j_stochastic(
                self.require_ensemble(), self.axes, fixed=self.fixed)
        return self.cache["j_stochastic"]


@dataclass
class RunResult:
    config: ScenarioConfig
    reports: List[checks.CheckReport]
    errors: Dict[str, str]
    ensemble: Optional[PathEnsemble] = None
    context: Optional[RunContext] = None

    @property
    def ok(self) -> bool:
        return not self.errors and all(r.outcome_ok for r in self.reports)

    @property
    def exit_status(self) -> int:
        return EXIT_OK if self.ok else EXIT_FAILED


# ---------------------------------------------------------------------------
# Check runners
# ---------------------------------------------------------------------------

def _periods(axes: Axes) -> List[float]:
    periods = [1.0, 1.0, 1.0, 1.0]
    for axis in axes:
        periods[axis.index] = axis.high - axis.low
    return periods


def _test_fields(ctx: RunContext, spec: CheckSpec):
    if spec.field == "constant":
        return checks.ConstantField(CONSTANT_ALPHA), checks.ConstantField(CONSTANT_BETA), 0.0
    if spec.field == "coordinate":
        field_ = checks.CoordinateField()
        return field_, field_, checks.ito_trace(ctx.require_ensemble())
    periods = _periods(ctx.axes)
    active = [a.index for a in ctx.axes]
    alpha = checks.TrigonometricField.random(RngStream(ctx.seed, 1, POINT_STREAM).generator,
                                             periods, active=active)
    beta = checks.TrigonometricField.random(RngStream(ctx.seed, 2, POINT_STREAM).generator,
                                            periods, active=active)
    return alpha, beta, 0.0


def _perturbation(ctx: RunContext, spec: CheckSpec) -> checks.TrigonometricField:
    """eta^c = amplitude sin(2 pi harmonic x^c / period) along one grid axis"""
    matches = [a for a in ctx.analytic_axes if a.index == spec.component]
    if not matches:
        raise StochasticKGError(f"perturbation component {spec.component} is not a grid axis")
    axis = matches[0]
    amplitudes = np.zeros((1, 4), dtype=complex)
    wavenumbers = np.zeros((1, 4))
    amplitudes[0, spec.component] = -1j * spec.amplitude
    wavenumbers[0, spec.component] = 2.0 * np.pi * spec.harmonic / (axis.high - axis.low)
    return checks.TrigonometricField(amplitudes, wavenumbers)


def _or(value, default):
    return default if value is None else value


def run_wiener_law(ctx, spec):
    return checks.wiener_law_check(ctx.require_ensemble(),
                                   relative=_or(spec.tolerance, checks.WIENER_RELATIVE))


def run_quadratic_variation(ctx, spec):
    return checks.quadratic_variation_check(ctx.require_ensemble(),
                                            relative=_or(spec.tolerance, checks.WIENER_RELATIVE))


def run_lorentz_invariant(ctx, spec):
    return checks.lorentz_invariant_estimate(ctx.require_ensemble(), n_se=spec.n_se)


def run_energy_constancy(ctx, spec):
    return checks.energy_constancy_check(ctx.require_ensemble(), n_se=spec.n_se)


def run_ehrenfest(ctx, spec):
    return checks.ehrenfest_check(ctx.require_ensemble(), stride=spec.stride, n_se=spec.n_se,
                                  relative=_or(spec.tolerance, checks.EHRENFEST_RELATIVE),
                                  force_scale=spec.force_scale)


def run_mean_velocity(ctx, spec):
    return checks.mean_velocity_check(ctx.require_ensemble(), n_se=spec.n_se)


def run_partial_integration(ctx, spec):
    alpha, beta, gap = _test_fields(ctx, spec)
    report = checks.partial_integration_check(ctx.require_ensemble(), alpha, beta,
                                              expected_gap=gap, n_se=spec.n_se)
    report.details["field"] = spec.field
    return report


def run_action_stationarity(ctx, spec):
    return checks.action_stationarity_check(
        ctx.model, ctx.potential, _perturbation(ctx, spec), ctx.analytic_axes,
        epsilon_max=spec.epsilon_max, fixed=ctx.fixed,
        relative=_or(spec.tolerance, checks.ACTION_RELATIVE))


def run_kg_residual(ctx, spec):
    return checks.kg_residual_check(ctx.model, ctx.potential, ctx.points(),
                                    _or(spec.tolerance, checks.KG_TOLERANCE))


def run_eom_residual(ctx, spec):
    return checks.eom_residual_check(ctx.model, ctx.potential, ctx.points(),
                                     _or(spec.tolerance, checks.EOM_TOLERANCE))


def run_eom_kg_relation(ctx, spec):
    return checks.eom_kg_relation_check(ctx.model, ctx.potential, ctx.points(),
                                        _or(spec.tolerance, checks.EOM_TOLERANCE))


def run_curl_identity(ctx, spec):
    return checks.curl_identity_check(ctx.model, ctx.potential, ctx.points(),
                                      _or(spec.tolerance, checks.CURL_TOLERANCE))


def run_gauge_invariance(ctx, spec):
    return checks.gauge_invariance_check(ctx.model, ctx.potential, build_gauge(ctx.config),
                                         ctx.points(), _or(spec.tolerance, checks.GAUGE_TOLERANCE))


def _density_runner(kind: str) -> Callable:
    def run(ctx, spec):
        histogram = spec.source == "histogram"
        return checks.density_residual_check(
            kind, ctx.model, ctx.potential, ctx.axes if histogram else ctx.analytic_axes,
            ensemble=ctx.require_ensemble() if histogram else None,
            tau_values=ctx.config.grid.tau_values, fixed=ctx.fixed,
            drift_kind=spec.drift_kind, drift_scale=spec.drift_scale, lam_scale=spec.lam_scale,
            tolerance=_or(spec.tolerance, checks.FD_TOLERANCE), n_se=spec.n_se, pooled=spec.pooled)
    return run


def run_current_equivalence(ctx, spec):
    jkg = checks.compute_j_kg(ctx.model, ctx.potential, ctx.axes, fixed=ctx.fixed)
    return checks.current_equivalence_check(ctx.stochastic_current(), jkg,
                                            _or(spec.tolerance, checks.CURRENT_TOLERANCE),
                                            master_seed=ctx.seed)


def run_charge_conservation(ctx, spec):
    if spec.source == "histogram":
        current = ctx.stochastic_current()
    else:
        current = checks.compute_j_kg(ctx.model, ctx.potential, ctx.analytic_axes, fixed=ctx.fixed)
    return checks.charge_conservation_check(current, _or(spec.tolerance, checks.FD_TOLERANCE),
                                            n_se=spec.n_se, master_seed=ctx.seed)


RUNNERS: Dict[str, Callable] = {
    "wiener_law": run_wiener_law,
    "quadratic_variation": run_quadratic_variation,
    "lorentz_invariant": run_lorentz_invariant,
    "energy_constancy": run_energy_constancy,
    "ehrenfest": run_ehrenfest,
    "mean_velocity": run_mean_velocity,
    "partial_integration": run_partial_integration,
    "action_stationarity": run_action_stationarity,
    "kg_residual": run_kg_residual,
    "eom_residual": run_eom_residual,
    "eom_kg_relation": run_eom_kg_relation,
    "curl_identity": run_curl_identity,
    "gauge_invariance": run_gauge_invariance,
    "fokker_planck": _density_runner("fokker_planck"),
    "continuity": _density_runner("continuity"),
    "osmotic": _density_runner("osmotic"),
    "current_equivalence": run_current_equivalence,
    "charge_conservation": run_charge_conservation,
}


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------

def simulate(config: ScenarioConfig, model, potential, consts, workers: int = 1) -> PathEnsemble:
    s = config.simulation
    integrator = simulate_forward if s.direction == FORWARD else simulate_backward
    return integrator(model, potential, consts, build_initial(config), s.n_paths,
                      build_tau_grid(config), s.master_seed, workers=workers,
                      substeps=s.substeps, brownian_refinement=s.brownian_refinement,
                      noise_scale=s.noise_scale, drift_scale=s.drift_scale,
                      scenario=config.scenario)


def run_scenario(config: ScenarioConfig, workers: int = 1) -> RunResult:
    """Simulates when a check needs paths, then runs every configured check in order"""
    consts = build_constants(config)
    potential = build_potential(config)
    model = build_model(config, potential)
    ctx = RunContext(config, consts, model, potential, build_axes(config),
                     build_axes(config, analytic=True))
    if needs_ensemble(config):
        ctx.ensemble = simulate(config, model, potential, consts, workers)

    reports, errors = [], {}
    for spec in config.checks:
        name = spec.report_name
        log.info("Running %s", name)
        try:
            report = RUNNERS[spec.name](ctx, spec)
        except (StochasticKGError, ValueError) as exc:
            log.error("scenario %s, check %s: %s", config.scenario, name, exc)
            errors[name] = f"{type(exc).__name__}: {exc}"
            continue
        reports.append(report.labelled(name=name, expected_fail=spec.expected_fail,
                                       scenario=config.scenario))
    return RunResult(config, reports, errors, ctx.ensemble, ctx)


def _header(config: ScenarioConfig) -> dict:
    return {"kind": "header", "scenario": config.scenario,
            "master_seed": config.simulation.master_seed, "config_hash": config_hash(config),
            "version": VERSION}


def _header_line(config: ScenarioConfig) -> str:
    h = _header(config)
    return (f"scenario={h['scenario']} master_seed={h['master_seed']} "
            f"config_hash={h['config_hash']} version={h['version']}")


def write_reports(result: RunResult, path: Path):
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(json.dumps(_header(result.config), sort_keys=True) + "\n")
        for report in result.reports:
            handle.write(json.dumps(report.to_dict(), sort_keys=True) + "\n")
        for name, message in sorted(result.errors.items()):
            record = {"kind": "error", "name": name, "message": message}
            handle.write(json.dumps(record, sort_keys=True) + "\n")


def summary_table(result: RunResult) -> str:
    lines = [f"# {_header_line(result.config)}",
             f"{'check':<36} {'statistic':>12} {'target':>12} {'tolerance':>12} "
             f"{'basis':<13} {'passed':<6} {'expected':<8} outcome"]
    for r in result.reports:
        expected = "fail" if r.expected_fail else "pass"
        lines.append(f"{r.name:<36} {r.statistic:>12.4e} {r.target:>12.4e} {r.tolerance:>12.4e} "
                     f"{r.basis:<13} {str(r.passed):<6} {expected:<8} "
                     f"{'OK' if r.outcome_ok else 'MISMATCH'}")
    for name, message in sorted(result.errors.items()):
        lines.append(f"{name:<36} ERROR {message}")
    lines.append(f"overall: {'OK' if result.ok else 'FAILED'}")
    return "\n".join(lines) + "\n"


def provenance_document(config: ScenarioConfig) -> dict:
    return {"config": to_dict(config), "config_hash": config_hash(config),
            "master_seed": config.simulation.master_seed, "version": VERSION}


def write_provenance(config: ScenarioConfig, path: Path):
    text = yaml.safe_dump(provenance_document(config), sort_keys=False, default_flow_style=None)
    path.write_text(f"# {_header_line(config)}\n{text}", encoding="utf-8")


def export_grids(result: RunResult, directory: Path) -> List[Path]:
    ctx, config = result.context, result.config
    header = _header_line(config)
    written = []
    analytic = analytic_density(ctx.model, ctx.analytic_axes, config.grid.tau_values[:1], ctx.fixed)
    path = directory / "grid_density_analytic.csv"
    export_density_csv(analytic, path, header)
    written.append(path)
    jkg = checks.compute_j_kg(ctx.model, ctx.potential, ctx.analytic_axes, fixed=ctx.fixed)
    path = directory / "grid_current_kg.csv"
    export_grid_csv(path, jkg.axes, [0.0], {"j": jkg.values[None]}, header)
    written.append(path)
    if result.ensemble is not None:
        slots = [0, result.ensemble.n_slices // 2, result.ensemble.n_slices - 1]
        histogram = estimate_density(result.ensemble, ctx.axes, slots, ctx.fixed)
        path = directory / "grid_density_histogram.csv"
        export_density_csv(histogram, path, header)
        written.append(path)
        js = ctx.stochastic_current()
        path = directory / "grid_current_stochastic.csv"
        export_grid_csv(path, js.axes, [0.0], {"j": js.values[None]}, header)
        written.append(path)
    return written


def write_artifacts(result: RunResult, directory: Path) -> List[Path]:
    """reports.jsonl, summary.txt, provenance.yaml and the optional dumps"""
    directory.mkdir(parents=True, exist_ok=True)
    config = result.config
    write_reports(result, directory / "reports.jsonl")
    (directory / "summary.txt").write_text(summary_table(result), encoding="utf-8")
    write_provenance(config, directory / "provenance.yaml")
    written = [directory / name for name in ("reports.jsonl", "summary.txt", "provenance.yaml")]
    if config.output.dump_paths and result.ensemble is not None:
        dump_paths(result.ensemble, directory / "paths.jsonl", header=_header(config))
        written.append(directory / "paths.jsonl")
    if config.output.export_grids:
        written.extend(export_grids(result, directory))
    return written


def list_scenarios() -> str:
    lines = [f"{'scenario':<32} description"]
    for name, document in BUILTIN_SCENARIOS.items():
        lines.append(f"{name:<32} {document['description']}")
        lines.append(f"{'':<32}   exercises: {SCENARIO_NOTES[name]}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stochastic-kg",
        description="Stochastic Klein-Gordon path simulation and identity checks")
    parser.add_argument("--version", action="version", version=f"%(prog)s {VERSION}")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    commands = parser.add_subparsers(dest="command", required=True)

    commands.add_parser("list", help="list builtin scenarios")
    run = commands.add_parser("run", help="run a scenario file or a builtin scenario")
    source = run.add_mutually_exclusive_group(required=True)
    source.add_argument("config", nargs="?", help="scenario YAML or provenance.yaml")
    source.add_argument("--builtin", metavar="ID", help="builtin scenario id")
    run.add_argument("--output", help="output root directory (default $STOCHASTIC_KG_OUTPUT or ./runs)")
    run.add_argument("--seed", type=int, help="override simulation.master_seed")
    run.add_argument("--workers", type=int, default=1, help="threads for path integration")
    commands.add_parser("dump-schema", help="print the scenario schema")
    return parser


def _configure_logging(args):
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s [%(levelname)s] %(name)s: %(message)s")


def _load(args) -> ScenarioConfig:
    if args.builtin:
        config = builtin_config(args.builtin)
    else:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"no such scenario file: {path}")
        config = load_config(path)
    if args.seed is not None:
        config = with_seed(config, args.seed)
    return config


def cmd_run(args) -> int:
    try:
        config = _load(args)
    except ConfigError as exc:
        print(f"[ERROR] {exc}")
        return EXIT_CONFIG
    if args.workers < 1:
        print("[ERROR] --workers must be at least 1")
        return EXIT_CONFIG

    directory = output_directory(config, args.output)
    try:
        result = run_scenario(config, workers=args.workers)
    except StochasticKGError as exc:
        log.error("scenario %s: %s", config.scenario, exc)
        print(f"[ERROR] scenario {config.scenario}: {exc}")
        return EXIT_FAILED
    write_artifacts(result, directory)
    print(summary_table(result), end="")
    print(f"[{'OK' if result.ok else 'FAIL'}] artifacts written to {directory}")
    return result.exit_status


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging(args)
    if args.command == "list":
        print(list_scenarios())
        return EXIT_OK
    if args.command == "dump-schema":
        print(dump_schema(), end="")
        return EXIT_OK
    return cmd_run(args)


if __name__ == "__main__":
    sys.exit(main())
