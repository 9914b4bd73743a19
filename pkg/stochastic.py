"""
Seeded random streams, (-g)-Wiener increments and Euler-Maruyama integration
of the dual-progressive process x(tau) driven by the drifts V+ / V-
"""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from errors import PathAbortError
from spacetime import FourVector, PhysicalConstants
from wavefunction import (NODE_EPSILON, PotentialModel, WaveFunctionModel, check_pairing,
                          complex_velocity, describe_pair, drift_velocities)

log = logging.getLogger("stochastic_kg.stochastic")

# Substream purposes; the purpose sits in counter word 2 of the Philox state
INCREMENT_STREAM = 0
INITIAL_STREAM = 1
BOOTSTRAP_STREAM = 2
POINT_STREAM = 3
BACKWARD_OFFSET = 4

FORWARD = "forward"
BACKWARD = "backward"

ABORT_LIMIT = 1e-3
CHUNK_SIZE = 1024
PROPOSALS_PER_ROUND = 16
MAX_REJECTION_ROUNDS = 10_000
GRID_TOLERANCE = 1e-12


@lru_cache(maxsize=64)
def _philox_key(master_seed: int) -> Tuple[int, int]:
    key = np.random.SeedSequence(master_seed).generate_state(2, dtype=np.uint64)
    return int(key[0]), int(key[1])


class RngStream:
    """Counter-based substream (master_seed, path_index, purpose) -> independent Philox generator"""

    def __init__(self, master_seed: int, path_index: int, purpose: int = INCREMENT_STREAM):
        if not 0 <= int(master_seed) < 2 ** 64:
            raise ValueError(f"master_seed must be a 64-bit unsigned integer, got {master_seed}")
        if int(path_index) < 0 or int(purpose) < 0:
            raise ValueError("path_index and purpose must be non-negative")
        self.master_seed = int(master_seed)
        self.path_index = int(path_index)
        self.purpose = int(purpose)
        bit_generator = np.random.Philox(
            key=np.array(_philox_key(self.master_seed), dtype=np.uint64),
            counter=np.array([0, 0, self.purpose, self.path_index], dtype=np.uint64))
        self.generator = np.random.Generator(bit_generator)

    def __repr__(self) -> str:
        return f"RngStream(master_seed={self.master_seed}, path_index={self.path_index}, purpose={self.purpose})"


@dataclass(frozen=True)
class WienerIncrement:
    """dW with four i.i.d. N(0, dtau) components"""
    dW: FourVector
    dtau: float


def sample_increment(rng: RngStream, dtau: float) -> WienerIncrement:
    if not dtau > 0.0:
        raise ValueError(f"dtau must be positive, got {dtau}")
    draws = rng.generator.normal(0.0, math.sqrt(dtau), size=4)
    return WienerIncrement(FourVector.from_array(draws), float(dtau))


def sample_increments(rng: RngStream, dtau: float, n: int) -> np.ndarray:
    """n consecutive increments as an (n, 4) array"""
    if not dtau > 0.0:
        raise ValueError(f"dtau must be positive, got {dtau}")
    return rng.generator.normal(0.0, math.sqrt(dtau), size=(int(n), 4))


def step(x, drift, dtau: float, dW, lam: float):
    """x + drift dtau + lambda dW"""
    if not dtau > 0.0:
        raise ValueError(f"dtau must be positive, got {dtau}")
    noise = dW.dW if isinstance(dW, WienerIncrement) else dW
    if isinstance(x, FourVector):
        drift_vec = drift if isinstance(drift, FourVector) else FourVector.from_array(drift)
        noise_vec = noise if isinstance(noise, FourVector) else FourVector.from_array(noise)
        return x + drift_vec * dtau + noise_vec * lam
    return np.asarray(x) + np.asarray(drift) * dtau + lam * np.asarray(noise)


@dataclass(frozen=True)
class InitialDistribution:
    """
    Law of the starting (or terminal) points.
    point:   every path starts at `point`
    box:     uniform on [low, high] per coordinate
    density: active coordinates drawn from phi* phi on [low, high]; the others at `point`
    """
    kind: str = "point"
    point: Tuple[float, ...] = (0.0, 0.0, 0.0, 0.0)
    low: Tuple[float, ...] = (0.0, 0.0, 0.0, 0.0)
    high: Tuple[float, ...] = (0.0, 0.0, 0.0, 0.0)
    active: Tuple[int, ...] = (0, 3)

    def __post_init__(self):
        if self.kind not in ("point", "box", "density"):
            raise ValueError(f"unknown initial distribution kind {self.kind!r}")
        for name in ("point", "low", "high"):
            values = tuple(float(v) for v in getattr(self, name))
            if len(values) != 4:
                raise ValueError(f"initial.{name} needs 4 components")
            object.__setattr__(self, name, values)
        object.__setattr__(self, "active", tuple(int(a) for a in self.active))
        if any(h < l for l, h in zip(self.low, self.high)):
            raise ValueError("initial.high must not be below initial.low")

    def descriptor(self) -> dict:
        return {"kind": self.kind, "point": list(self.point), "low": list(self.low),
                "high": list(self.high), "active": list(self.active)}


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """N sampled paths on a uniform proper-time grid; write-once"""
    tau_grid: np.ndarray
    paths: np.ndarray
    direction: str
    model: WaveFunctionModel
    potential: PotentialModel
    consts: PhysicalConstants
    provenance: Dict[str, object] = field(default_factory=dict)
    path_indices: Optional[np.ndarray] = None
    noise_scale: float = 1.0
    drift_scale: float = 1.0
    substeps: int = 1

    def __post_init__(self):
        tau = np.array(self.tau_grid, dtype=float)
        paths = np.array(self.paths, dtype=float)
        validate_tau_grid(tau)
        if paths.ndim != 3 or paths.shape[1:] != (tau.size, 4):
            raise ValueError(f"paths must have shape (N, {tau.size}, 4), got {paths.shape}")
        if not np.all(np.isfinite(paths)):
            raise ValueError("ensemble contains non-finite points")
        if self.direction not in (FORWARD, BACKWARD):
            raise ValueError(f"direction must be forward or backward, got {self.direction!r}")
        indices = (np.arange(paths.shape[0]) if self.path_indices is None
                   else np.array(self.path_indices, dtype=np.int64))
        for arr in (tau, paths, indices):
            arr.setflags(write=False)
        object.__setattr__(self, "tau_grid", tau)
        object.__setattr__(self, "paths", paths)
        object.__setattr__(self, "path_indices", indices)

    @property
    def n_paths(self) -> int:
        return self.paths.shape[0]

    @property
    def n_slices(self) -> int:
        return self.tau_grid.size

    @property
    def dtau(self) -> float:
        return float(self.tau_grid[1] - self.tau_grid[0]) if self.tau_grid.size > 1 else 0.0

    @property
    def lam(self) -> float:
        return self.consts.lam * self.noise_scale


def validate_tau_grid(tau: np.ndarray):
    if tau.ndim != 1 or tau.size < 1:
        raise ValueError("tau_grid must be a non-empty 1-D sequence")
    if tau.size > 1:
        steps = np.diff(tau)
        if np.any(steps <= 0.0):
            raise ValueError("tau_grid must be strictly increasing")
        if np.max(np.abs(steps - steps[0])) > GRID_TOLERANCE * max(1.0, abs(steps[0])):
            raise ValueError("tau_grid must have a constant step")


def make_tau_grid(tau_start: float, tau_end: float, dtau: float) -> np.ndarray:
    if not dtau > 0.0:
        raise ValueError(f"dtau must be positive, got {dtau}")
    n_steps = int(round((tau_end - tau_start) / dtau))
    if n_steps < 1 or not math.isclose(tau_start + n_steps * dtau, tau_end, rel_tol=1e-9, abs_tol=1e-12):
        raise ValueError("tau span must be a positive whole multiple of dtau")
    return tau_start + dtau * np.arange(n_steps + 1)


def _sample_states(model: WaveFunctionModel, dist: InitialDistribution, indices: np.ndarray,
                   master_seed: int, purpose: int) -> np.ndarray:
    """Initial points of the given paths, each drawn from its own substream"""
    states = np.tile(np.asarray(dist.point), (indices.size, 1))
    if dist.kind == "point":
        return states
    low, high = np.asarray(dist.low), np.asarray(dist.high)
    streams = [RngStream(master_seed, int(i), purpose).generator for i in indices]
    if dist.kind == "box":
        for row, gen in enumerate(streams):
            states[row] = gen.uniform(low, high)
        return states

    active = list(dist.active)
    bound = model.amplitude_bound() ** 2
    pending = np.arange(indices.size)
    for _ in range(MAX_REJECTION_ROUNDS):
        if pending.size == 0:
            return states
        proposals = np.tile(np.asarray(dist.point), (pending.size, PROPOSALS_PER_ROUND, 1))
        accept_draws = np.empty((pending.size, PROPOSALS_PER_ROUND))
        for slot, row in enumerate(pending):
            gen = streams[row]
            proposals[slot][:, active] = gen.uniform(
                low[active], high[active], size=(PROPOSALS_PER_ROUND, len(active)))
            accept_draws[slot] = gen.random(PROPOSALS_PER_ROUND)
        weights = np.abs(model.phi(proposals)) ** 2 / bound
        accepted = accept_draws < weights
        found = accepted.any(axis=1)
        first = np.argmax(accepted, axis=1)
        for slot in np.nonzero(found)[0]:
            states[pending[slot]] = proposals[slot, first[slot]]
        pending = pending[~found]
    raise RuntimeError("rejection sampling of initial states did not converge")


def _brownian_path(master_seed: int, index: int, purpose: int, n_steps: int,
                   refinement: int, dt: float) -> np.ndarray:
    """Per-path integration increments; coarse steps sum `refinement` fine draws"""
    gen = RngStream(master_seed, index, purpose).generator
    fine = gen.standard_normal((n_steps * refinement, 4)) * math.sqrt(dt / refinement)
    return fine.reshape(n_steps, refinement, 4).sum(axis=1)


def _integrate_chunk(model, A, direction, dist, indices, n_records, substeps, refinement,
                     dt, lam, drift_scale, master_seed, node_epsilon):
    purpose_offset = 0 if direction == FORWARD else BACKWARD_OFFSET
    n_int = (n_records - 1) * substeps
    states = _sample_states(model, dist, indices, master_seed, INITIAL_STREAM + purpose_offset)
    noise = np.stack([_brownian_path(master_seed, int(i), INCREMENT_STREAM + purpose_offset,
                                     n_int, refinement, dt) for i in indices]) if n_int else None
    record = np.empty((indices.size, n_records, 4))
    record[:, 0] = states
    alive = np.ones(indices.size, dtype=bool)
    sign = 1.0 if direction == FORWARD else -1.0
    x = states.copy()
    for s in range(n_int):
        velocity = complex_velocity(model, A, x, node_epsilon=node_epsilon, on_node="nan")
        vplus, vminus = drift_velocities(velocity)
        drift = vplus if direction == FORWARD else vminus
        alive &= np.all(np.isfinite(drift), axis=1)
        drift = np.where(alive[:, None], drift, 0.0)
        x = x + sign * (drift_scale * drift * dt + lam * noise[:, s])
        if (s + 1) % substeps == 0:
            record[:, (s + 1) // substeps] = x
    log.debug("chunk %d..%d integrated (%s)", int(indices[0]), int(indices[-1]), direction)
    return record, alive


def _simulate(direction, model, A, consts, dist, n_paths, tau_grid, master_seed, workers,
              substeps, brownian_refinement, noise_scale, drift_scale, scenario,
              node_epsilon, abort_limit) -> PathEnsemble:
    check_pairing(model, A, consts)
    tau = np.asarray(tau_grid, dtype=float)
    validate_tau_grid(tau)
    if n_paths < 1:
        raise ValueError("n_paths must be at least 1")
    if substeps < 1 or brownian_refinement < 1:
        raise ValueError("substeps and brownian_refinement must be >= 1")
    dt = (float(tau[1] - tau[0]) / substeps) if tau.size > 1 else 1.0
    lam = consts.lam * noise_scale

    chunks = [np.arange(start, min(start + CHUNK_SIZE, n_paths))
              for start in range(0, n_paths, CHUNK_SIZE)]
    log.info("Simulating %d %s paths over %d slices (%d chunk(s), %d worker(s))",
             n_paths, direction, tau.size, len(chunks), workers)

    def run(indices):
        return _integrate_chunk(model, A, direction, dist, indices, tau.size, substeps,
                                brownian_refinement, dt, lam, drift_scale, master_seed, node_epsilon)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(indices) for indices in chunks]

    records = np.concatenate([r for r, _ in results])
    alive = np.concatenate([a for _, a in results])
    aborted = np.nonzero(~alive)[0]
    if aborted.size > abort_limit * n_paths:
        raise PathAbortError(int(aborted.size), n_paths, abort_limit)
    if aborted.size:
        log.warning("%d path(s) hit a node and were dropped", aborted.size)
    if direction == BACKWARD:
        records = records[:, ::-1]

    provenance = {
        "master_seed": int(master_seed),
        "scenario": scenario,
        "direction": direction,
        "n_paths_requested": int(n_paths),
        "aborted_paths": aborted.tolist(),
        "initial": dist.descriptor(),
        **describe_pair(model, A),
    }
    return PathEnsemble(tau_grid=tau, paths=records[alive], direction=direction, model=model,
                        potential=A, consts=consts, provenance=provenance,
                        path_indices=np.nonzero(alive)[0], noise_scale=noise_scale,
                        drift_scale=drift_scale, substeps=substeps)


def simulate_forward(model: WaveFunctionModel, A: PotentialModel, consts: PhysicalConstants,
                     init: InitialDistribution, n_paths: int, tau_grid: Sequence[float],
                     master_seed: int, workers: int = 1, substeps: int = 1,
                     brownian_refinement: int = 1, noise_scale: float = 1.0,
                     drift_scale: float = 1.0, scenario: str = "custom",
                     node_epsilon: float = NODE_EPSILON,
                     abort_limit: float = ABORT_LIMIT) -> PathEnsemble:
    """Euler-Maruyama with drift V+ from tau_grid[0] upwards"""
    return _simulate(FORWARD, model, A, consts, init, n_paths, tau_grid, master_seed, workers,
                     substeps, brownian_refinement, noise_scale, drift_scale, scenario,
                     node_epsilon, abort_limit)


def simulate_backward(model: WaveFunctionModel, A: PotentialModel, consts: PhysicalConstants,
                      terminal: InitialDistribution, n_paths: int, tau_grid: Sequence[float],
                      master_seed: int, workers: int = 1, substeps: int = 1,
                      brownian_refinement: int = 1, noise_scale: float = 1.0,
                      drift_scale: float = 1.0, scenario: str = "custom",
                      node_epsilon: float = NODE_EPSILON,
                      abort_limit: float = ABORT_LIMIT) -> PathEnsemble:
    """x(tau - dtau) = x(tau) - V- dtau - lambda dW from tau_grid[-1] downwards; stored ascending"""
    return _simulate(BACKWARD, model, A, consts, terminal, n_paths, tau_grid, master_seed, workers,
                     substeps, brownian_refinement, noise_scale, drift_scale, scenario,
                     node_epsilon, abort_limit)


def simulate_both(model, A, consts, init, n_paths, tau_grid, master_seed, **kwargs):
    """Forward and backward ensembles on disjoint substreams of one seed"""
    forward = simulate_forward(model, A, consts, init, n_paths, tau_grid, master_seed, **kwargs)
    backward = simulate_backward(model, A, consts, init, n_paths, tau_grid, master_seed, **kwargs)
    return forward, backward


def _recorded_drift(ensemble: PathEnsemble, points: np.ndarray) -> np.ndarray:
    velocity = complex_velocity(ensemble.model, ensemble.potential, points)
    vplus, vminus = drift_velocities(velocity)
    drift = vplus if ensemble.direction == FORWARD else vminus
    return ensemble.drift_scale * drift


def increment_residuals(ensemble: PathEnsemble) -> np.ndarray:
    """
    Noise increments recovered from the paths, (dx - V dtau) / lambda, shape
    (N, n_slices - 1, 4); exact when the ensemble was integrated with substeps = 1
    """
    if ensemble.n_slices < 2:
        raise ValueError("increment statistics need at least two tau slices")
    if ensemble.lam == 0.0:
        raise ValueError("increment statistics are undefined for lambda = 0")
    paths, dtau = ensemble.paths, ensemble.dtau
    if ensemble.direction == FORWARD:
        start = paths[:, :-1]
        drift = _recorded_drift(ensemble, start)
        return (paths[:, 1:] - start - drift * dtau) / ensemble.lam
    start = paths[:, 1:]
    drift = _recorded_drift(ensemble, start)
    return (start - drift * dtau - paths[:, :-1]) / ensemble.lam


def increment_statistics(ensemble: PathEnsemble) -> dict:
    """Pooled mean and covariance of increment_residuals"""
    dtau = ensemble.dtau
    pooled = increment_residuals(ensemble).reshape(-1, 4)
    return {
        "mean": FourVector.from_array(pooled.mean(axis=0)),
        "covariance": np.cov(pooled, rowvar=False),
        "count": int(pooled.shape[0]),
        "dtau": dtau,
    }


def quadratic_variation(ensemble: PathEnsemble) -> np.ndarray:
    """Pooled sum dx^mu dx^nu per unit proper time (Ito rule dW dW = dtau)"""
    increments = np.diff(ensemble.paths, axis=1).reshape(-1, 4)
    span = ensemble.n_paths * (ensemble.tau_grid[-1] - ensemble.tau_grid[0])
    return increments.T @ increments / span


def mean_velocity(ensemble: PathEnsemble) -> np.ndarray:
    """First differences of the ensemble-mean trajectory, shape (n_slices - 1, 4)"""
    return np.diff(ensemble.paths.mean(axis=0), axis=0) / ensemble.dtau


def dump_paths(ensemble: PathEnsemble, path, header: Optional[dict] = None):
    """One JSON object per (path, step): path_index, tau, c0..c3"""
    with open(path, "w", encoding="utf-8") as handle:
        if header is not None:
            handle.write(json.dumps(header, sort_keys=True) + "\n")
        for row, index in enumerate(ensemble.path_indices):
            for slot, tau in enumerate(ensemble.tau_grid):
                c0, c1, c2, c3 = ensemble.paths[row, slot]
                record = {"path_index": int(index), "tau": float(tau),
                          "c0": float(c0), "c1": float(c1), "c2": float(c2), "c3": float(c3)}
                handle.write(json.dumps(record, sort_keys=True) + "\n")
