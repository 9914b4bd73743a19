"""
Density estimation on (t, z)-type windows and finite-difference residuals of the
Fokker-Planck, continuity and osmotic relations
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence, Tuple, Union

import numpy as np

from errors import AllBinsMasked, AxesMismatch, InsufficientSlices
from spacetime import METRIC_SIGNS, PhysicalConstants
from wavefunction import (PotentialModel, WaveFunctionModel, check_pairing, complex_velocity,
                          density_profile, drift_velocities)

log = logging.getLogger("stochastic_kg.density")

HISTOGRAM = "histogram"
ANALYTIC = "analytic"

NORMALIZATION_TOLERANCE = 1e-9
COVERAGE_WARNING = 0.99
MIN_COUNT = 5
SMOOTHING_COUNT = 0.5
FD_TOLERANCE = 1e-4

DRIFT_KINDS = ("vplus", "vminus", "re", "im")


@dataclass(frozen=True)
class Axis:
    """One active coordinate: index into (c0..c3), window [low, high), bins"""
    index: int
    low: float
    high: float
    n_bins: int
    periodic: bool = False

    def __post_init__(self):
        if self.index not in (0, 1, 2, 3):
            raise ValueError(f"axis index must be 0..3, got {self.index}")
        if not self.high > self.low:
            raise ValueError("axis high must exceed low")
        if self.n_bins < 3:
            raise ValueError("an axis needs at least 3 bins for central differences")

    @property
    def width(self) -> float:
        return (self.high - self.low) / self.n_bins

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(self.low, self.high, self.n_bins + 1)

    @property
    def centers(self) -> np.ndarray:
        return self.low + self.width * (np.arange(self.n_bins) + 0.5)

    def wrap(self, values: np.ndarray) -> np.ndarray:
        if not self.periodic:
            return values
        return self.low + np.mod(values - self.low, self.high - self.low)

    def descriptor(self) -> dict:
        return {"index": self.index, "low": self.low, "high": self.high,
                "n_bins": self.n_bins, "periodic": self.periodic}


Axes = Tuple[Axis, ...]


def cell_volume(axes: Axes) -> float:
    return float(np.prod([a.width for a in axes]))


def grid_points(axes: Axes, fixed: Sequence[float] = (0.0, 0.0, 0.0, 0.0)) -> np.ndarray:
    """Bin-centre spacetime points, shape (*bins, 4)"""
    shape = tuple(a.n_bins for a in axes)
    points = np.broadcast_to(np.asarray(fixed, dtype=float), shape + (4,)).copy()
    mesh = np.meshgrid(*[a.centers for a in axes], indexing="ij")
    for axis, coords in zip(axes, mesh):
        points[..., axis.index] = coords
    return points


def same_axes(first: Axes, second: Axes):
    if tuple(first) != tuple(second):
        raise AxesMismatch("grids are defined on different axes")


@dataclass(frozen=True, eq=False)
class DensityGrid:
    """p(x, tau_i) on the active axes, one slice per tau value"""
    axes: Axes
    values: np.ndarray
    tau_values: np.ndarray
    source: str = ANALYTIC
    fixed: Tuple[float, ...] = (0.0, 0.0, 0.0, 0.0)
    counts: Optional[np.ndarray] = None
    n_samples: Optional[np.ndarray] = None

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        tau = np.atleast_1d(np.array(self.tau_values, dtype=float))
        shape = (tau.size,) + tuple(a.n_bins for a in self.axes)
        if values.shape != shape:
            raise ValueError(f"density values must have shape {shape}, got {values.shape}")
        if np.any(values < 0.0):
            raise ValueError("density must be non-negative")
        norms = values.reshape(tau.size, -1).sum(axis=1) * cell_volume(self.axes)
        if np.any(np.abs(norms - 1.0) > NORMALIZATION_TOLERANCE):
            raise ValueError(f"density slices are not normalized: {norms}")
        values.setflags(write=False)
        object.__setattr__(self, "axes", tuple(self.axes))
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "tau_values", tau)
        object.__setattr__(self, "fixed", tuple(float(v) for v in self.fixed))

    @property
    def cell_volume(self) -> float:
        return cell_volume(self.axes)

    @property
    def dtau(self) -> float:
        if self.tau_values.size < 2:
            return 0.0
        return float(self.tau_values[1] - self.tau_values[0])

    def normalization(self) -> np.ndarray:
        return self.values.reshape(self.tau_values.size, -1).sum(axis=1) * self.cell_volume

    def points(self) -> np.ndarray:
        return grid_points(self.axes, self.fixed)


@dataclass(frozen=True)
class ResidualReport:
    name: str
    rms_residual: float
    max_residual: float
    scale: float
    passed: bool
    tolerance: float
    basis: str = "fd-error"
    components: Dict[str, float] = field(default_factory=dict)
    masked_bins: int = 0

    @property
    def relative(self) -> float:
        return self.rms_residual / self.scale if self.scale > 0.0 else float(self.rms_residual > 0.0)

    def as_dict(self) -> dict:
        return {"name": self.name, "rms_residual": self.rms_residual,
                "max_residual": self.max_residual, "scale": self.scale, "passed": self.passed,
                "tolerance": self.tolerance, "basis": self.basis,
                "components": dict(self.components), "masked_bins": self.masked_bins}


# ---------------------------------------------------------------------------
# Estimation
# ---------------------------------------------------------------------------

def bin_indices(coords: np.ndarray, axes: Axes) -> np.ndarray:
    """Flat bin index per sample (coords shape (..., 4)); -1 outside the window"""
    flat = np.zeros(coords.shape[:-1], dtype=np.int64)
    inside = np.ones(coords.shape[:-1], dtype=bool)
    for axis in axes:
        values = axis.wrap(coords[..., axis.index])
        slot = np.floor((values - axis.low) / axis.width).astype(np.int64)
        if axis.periodic:
            slot = np.clip(slot, 0, axis.n_bins - 1)
        inside &= (slot >= 0) & (slot < axis.n_bins)
        flat = flat * axis.n_bins + np.clip(slot, 0, axis.n_bins - 1)
    return np.where(inside, flat, -1)


def histogram_values(indices: np.ndarray, axes: Axes,
                     weights: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray, int]:
    """(normalized density, raw counts, in-window samples) from flat bin indices"""
    n_cells = int(np.prod([a.n_bins for a in axes]))
    valid = indices >= 0
    w = None if weights is None else weights[valid]
    counts = np.bincount(indices[valid], weights=w, minlength=n_cells).astype(float)
    n_in = float(counts.sum())
    shape = tuple(a.n_bins for a in axes)
    if n_in <= 0.0:
        raise ValueError("no samples fall inside the density window")
    return (counts / (n_in * cell_volume(axes))).reshape(shape), counts.reshape(shape), int(n_in)


def estimate_density(ensemble, axes: Axes, tau_index: Union[int, Sequence[int]],
                     fixed: Sequence[float] = (0.0, 0.0, 0.0, 0.0)) -> DensityGrid:
    """Normalized histogram of the paths at the given tau slice(s)"""
    if ensemble.n_paths == 0:
        raise ValueError("ensemble is empty")
    slots = [tau_index] if np.isscalar(tau_index) else list(tau_index)
    values, counts, samples = [], [], []
    for slot in slots:
        coords = ensemble.paths[:, slot]
        indices = bin_indices(coords, axes)
        coverage = float(np.mean(indices >= 0))
        if coverage < COVERAGE_WARNING:
            log.warning("density window covers only %.1f%% of samples at tau index %d",
                        100.0 * coverage, slot)
        density, raw, n_in = histogram_values(indices, axes)
        values.append(density)
        counts.append(raw)
        samples.append(n_in)
    return DensityGrid(axes=tuple(axes), values=np.stack(values),
                       tau_values=ensemble.tau_grid[slots], source=HISTOGRAM, fixed=tuple(fixed),
                       counts=np.stack(counts), n_samples=np.asarray(samples))


def analytic_density(model: WaveFunctionModel, axes: Axes,
                     tau_values: Sequence[float] = (0.0,),
                     fixed: Sequence[float] = (0.0, 0.0, 0.0, 0.0)) -> DensityGrid:
    """phi* phi on the bin centres, normalized over the window; identical in every slice"""
    profile = density_profile(model, grid_points(axes, fixed))
    total = profile.sum() * cell_volume(axes)
    if not total > 0.0:
        raise ValueError("phi vanishes on the whole window")
    tau = np.atleast_1d(np.asarray(tau_values, dtype=float))
    values = np.broadcast_to(profile / total, (tau.size,) + profile.shape).copy()
    return DensityGrid(axes=tuple(axes), values=values, tau_values=tau, source=ANALYTIC,
                       fixed=tuple(fixed))


def drift_field(model: WaveFunctionModel, A: PotentialModel, consts: PhysicalConstants,
                kind: str = "vplus", scale: float = 1.0) -> Callable[[np.ndarray], np.ndarray]:
    """Real vector field x -> scale * {V+, V-, Re V, Im V}(x)"""
    if kind not in DRIFT_KINDS:
        raise ValueError(f"drift kind must be one of {DRIFT_KINDS}")
    check_pairing(model, A, consts)

    def evaluate(points: np.ndarray) -> np.ndarray:
        velocity = complex_velocity(model, A, points)
        if kind == "re":
            return scale * velocity.real
        if kind == "im":
            return scale * velocity.imag
        vplus, vminus = drift_velocities(velocity)
        return scale * (vplus if kind == "vplus" else vminus)

    return evaluate


def fit_normalization(p: np.ndarray, q: np.ndarray) -> Tuple[float, float]:
    """Least-squares c with p ~ c q, and the relative L2 misfit"""
    p, q = np.asarray(p, dtype=float).ravel(), np.asarray(q, dtype=float).ravel()
    denom = float(q @ q)
    if denom == 0.0:
        raise ValueError("reference profile is identically zero")
    c = float(p @ q) / denom
    norm = float(np.linalg.norm(p))
    misfit = float(np.linalg.norm(p - c * q)) / norm if norm > 0.0 else 0.0
    return c, misfit


def l1_distance(p: DensityGrid, q: DensityGrid) -> float:
    same_axes(p.axes, q.axes)
    diff = np.abs(p.values - q.values).reshape(p.values.shape[0], -1).sum(axis=1)
    return float(np.mean(diff) * p.cell_volume)


# ---------------------------------------------------------------------------
# Finite differences on grids; axis 0 of every array is tau
# ---------------------------------------------------------------------------

def partial(values: np.ndarray, position: int, axis: Axis) -> np.ndarray:
    """First derivative along grid axis `position` (0-based among the active axes)"""
    array_axis = position + 1
    if axis.periodic:
        return (np.roll(values, -1, axis=array_axis)
                - np.roll(values, 1, axis=array_axis)) / (2.0 * axis.width)
    return np.gradient(values, axis.width, axis=array_axis, edge_order=2)


def second_partial(values: np.ndarray, position: int, axis: Axis) -> np.ndarray:
    array_axis = position + 1
    if axis.periodic:
        return (np.roll(values, -1, axis=array_axis) - 2.0 * values
                + np.roll(values, 1, axis=array_axis)) / axis.width ** 2
    first = np.gradient(values, axis.width, axis=array_axis, edge_order=2)
    return np.gradient(first, axis.width, axis=array_axis, edge_order=2)


def interior_mask(axes: Axes, margin: int = 2) -> np.ndarray:
    """Bins far enough from non-periodic edges for central stencils"""
    mask = np.ones(tuple(a.n_bins for a in axes), dtype=bool)
    for position, axis in enumerate(axes):
        if axis.periodic:
            continue
        index = [slice(None)] * len(axes)
        index[position] = slice(0, margin)
        mask[tuple(index)] = False
        index[position] = slice(axis.n_bins - margin, None)
        mask[tuple(index)] = False
    return mask


def _tau_derivative(values: np.ndarray, dtau: float) -> np.ndarray:
    if values.shape[0] < 3:
        raise InsufficientSlices(f"need at least 3 tau slices, got {values.shape[0]}")
    if not dtau > 0.0:
        raise InsufficientSlices("tau slices must be equally spaced and increasing")
    return (values[2:] - values[:-2]) / (2.0 * dtau)


def transport_terms(values: np.ndarray, axes: Axes, dtau: float, drift: np.ndarray,
                    lam: float = 0.0, sign: int = 0) -> Dict[str, np.ndarray]:
    """
    Terms of d_tau p + d_mu (V^mu p) + sign (lambda^2/2) d^mu d_mu p on the interior
    tau slices. `drift` has shape (*bins, 4); only the active components enter.
    """
    values = np.asarray(values, dtype=float)
    terms = {"tau": _tau_derivative(values, dtau)}
    divergence = np.zeros_like(values)
    for position, axis in enumerate(axes):
        divergence += partial(drift[..., axis.index] * values, position, axis)
    terms["transport"] = divergence[1:-1]
    if sign:
        diffusion = np.zeros_like(values)
        for position, axis in enumerate(axes):
            diffusion += METRIC_SIGNS[axis.index] * second_partial(values, position, axis)
        terms["diffusion"] = (sign * 0.5 * lam * lam * diffusion)[1:-1]
    return terms


def _report(name: str, residual: np.ndarray, terms: Dict[str, np.ndarray], mask: np.ndarray,
            tolerance: float, budget: Optional[float], basis: str, masked: int = 0,
            components: Optional[Dict[str, float]] = None, floor: float = 0.0) -> ResidualReport:
    selected = residual[..., mask] if mask.ndim else residual
    if selected.size == 0:
        raise AllBinsMasked(f"{name}: no bins left to evaluate")
    rms = float(np.sqrt(np.mean(np.abs(selected) ** 2)))
    largest = float(np.max(np.abs(selected)))
    scale = max([float(np.sqrt(np.mean(np.abs(t[..., mask]) ** 2))) for t in terms.values()]
                + [floor])
    limit = budget if budget is not None else tolerance * scale
    return ResidualReport(name=name, rms_residual=rms, max_residual=largest, scale=scale,
                          passed=bool(rms <= limit), tolerance=float(limit), basis=basis,
                          components=components or {}, masked_bins=masked)


def _drift_on_grid(p: DensityGrid, drift) -> np.ndarray:
    if callable(drift):
        return np.asarray(drift(p.points()), dtype=float)
    return np.asarray(drift, dtype=float)


def _flux_floor(p: DensityGrid, drift: np.ndarray) -> float:
    """|V p| per unit window length; keeps the scale positive when every term cancels"""
    total = np.zeros_like(p.values)
    for axis in p.axes:
        total += (drift[..., axis.index] * p.values / (axis.high - axis.low)) ** 2
    return float(np.sqrt(np.mean(total)))


def fokker_planck_field(p: DensityGrid, drift, lam: float, sign: int) -> Tuple[np.ndarray, dict]:
    if sign not in (1, -1):
        raise ValueError("sign must be +1 (forward, V+) or -1 (backward, V-)")
    terms = transport_terms(p.values, p.axes, p.dtau, _drift_on_grid(p, drift), lam, sign)
    return sum(terms.values()), terms


def fokker_planck_residual(p: DensityGrid, drift, lam: float, sign: int,
                           tolerance: float = FD_TOLERANCE, budget: Optional[float] = None,
                           name: str = "fokker_planck") -> ResidualReport:
    """d_tau p + d_mu(V+- p) +- (lambda^2/2) d^mu d_mu p, wave-operator signature"""
    drift = _drift_on_grid(p, drift)
    residual, terms = fokker_planck_field(p, drift, lam, sign)
    basis = "fd-error" if budget is None else "bootstrap-se"
    return _report(name, residual, terms, interior_mask(p.axes), tolerance, budget, basis,
                   floor=_flux_floor(p, drift))


def continuity_field(p: DensityGrid, reV) -> Tuple[np.ndarray, dict]:
    terms = transport_terms(p.values, p.axes, p.dtau, _drift_on_grid(p, reV))
    return sum(terms.values()), terms


def continuity_residual(p: DensityGrid, reV, tolerance: float = FD_TOLERANCE,
                        budget: Optional[float] = None,
                        name: str = "continuity") -> ResidualReport:
    """d_tau p + d_mu(Re V^mu p)"""
    reV = _drift_on_grid(p, reV)
    residual, terms = continuity_field(p, reV)
    basis = "fd-error" if budget is None else "bootstrap-se"
    return _report(name, residual, terms, interior_mask(p.axes), tolerance, budget, basis,
                   floor=_flux_floor(p, reV))


def log_density(p: DensityGrid, min_count: int = MIN_COUNT) -> Tuple[np.ndarray, np.ndarray]:
    """ln p with its validity mask; histograms use half-count smoothing"""
    if p.source == HISTOGRAM and p.counts is not None:
        totals = np.asarray(p.n_samples, dtype=float).reshape((-1,) + (1,) * len(p.axes))
        smoothed = (p.counts + SMOOTHING_COUNT) / (totals * p.cell_volume)
        return np.log(smoothed), p.counts >= min_count
    valid = p.values > 0.0
    return np.log(np.where(valid, p.values, 1.0)), valid


def _stencil_mask(valid: np.ndarray, axes: Axes) -> np.ndarray:
    """A bin is usable only when it and its stencil neighbours are valid"""
    mask = valid.copy()
    for position in range(len(axes)):
        array_axis = position + 1
        mask &= np.roll(valid, 1, axis=array_axis) & np.roll(valid, -1, axis=array_axis)
    mask &= interior_mask(axes)[None]
    return mask


def osmotic_field(p: DensityGrid, imV, lam: float,
                  min_count: int = MIN_COUNT) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(residual, Im V, gradient term, mask); residual[..., k] for the k-th active axis"""
    ln_p, valid = log_density(p, min_count)
    mask = _stencil_mask(valid, p.axes)
    field_values = _drift_on_grid(p, imV)
    residual, osmotic, gradient = [], [], []
    for position, axis in enumerate(p.axes):
        grad = 0.5 * lam * lam * METRIC_SIGNS[axis.index] * partial(ln_p, position, axis)
        im_part = np.broadcast_to(field_values[..., axis.index], ln_p.shape)
        residual.append(im_part - grad)
        osmotic.append(im_part)
        gradient.append(grad)
    return (np.stack(residual, axis=-1), np.stack(osmotic, axis=-1),
            np.stack(gradient, axis=-1), mask)


def osmotic_residual(p: DensityGrid, imV, lam: float, tolerance: float = FD_TOLERANCE,
                     budget: Optional[float] = None, min_count: int = MIN_COUNT,
                     name: str = "osmotic") -> ResidualReport:
    """Im V^mu - (lambda^2/2) d^mu ln p over unmasked bins, per active component"""
    residual, osmotic, gradient, mask = osmotic_field(p, imV, lam, min_count)
    masked = int(mask.size - np.count_nonzero(mask))
    if not np.any(mask):
        raise AllBinsMasked(f"{name}: every bin is below {min_count} counts")
    if masked:
        log.debug("%s: %d bin(s) masked", name, masked)
    components = {}
    for position, axis in enumerate(p.axes):
        components[f"c{axis.index}"] = float(np.sqrt(np.mean(residual[..., position][mask] ** 2)))
    flat_mask = mask
    terms = {"osmotic": np.moveaxis(osmotic, -1, 0), "gradient": np.moveaxis(gradient, -1, 0)}
    stacked = np.moveaxis(residual, -1, 0)
    basis = "fd-error" if budget is None else "bootstrap-se"
    # ln p varying by order one across the narrowest window
    floor = 0.5 * lam * lam / min(a.high - a.low for a in p.axes)
    return _report(name, stacked, terms, flat_mask, tolerance, budget, basis, masked, components,
                   floor)


def export_grid_csv(path, axes: Axes, tau_values: Sequence[float],
                    columns: Dict[str, np.ndarray], header: str = ""):
    """One row per bin and slice: axis coordinates, tau, then each column"""
    tau_values = np.atleast_1d(np.asarray(tau_values, dtype=float))
    centers = np.meshgrid(*[a.centers for a in axes], indexing="ij")
    rows = []
    for slot, tau in enumerate(tau_values):
        parts = [c.ravel() for c in centers]
        parts.append(np.full(centers[0].size, tau))
        for values in columns.values():
            parts.append(np.asarray(values)[slot].reshape(centers[0].size, -1).T)
        rows.append(np.vstack([np.atleast_2d(p) for p in parts]).T)
    names = [f"c{a.index}" for a in axes] + ["tau"]
    for key, values in columns.items():
        width = int(np.prod(np.asarray(values).shape[1 + len(axes):]))
        names.extend([key] if width == 1 else [f"{key}_{i}" for i in range(width)])
    text_header = "\n".join(filter(None, [header, ",".join(names)]))
    np.savetxt(path, np.vstack(rows), delimiter=",", header=text_header, fmt="%.17g")


def export_density_csv(grid: DensityGrid, path, header: str = ""):
    export_grid_csv(path, grid.axes, grid.tau_values, {"p": grid.values}, header)
