"""
Verification checks over ensembles, density grids and current fields
Every check returns a CheckReport carrying its statistic, target, tolerance and tolerance basis
"""

import dataclasses
import logging
import math
from statistics import NormalDist
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, Optional, Sequence, Tuple

import numpy as np

from density import (ANALYTIC, HISTOGRAM, FD_TOLERANCE, Axes, DensityGrid, analytic_density,
                     bin_indices, cell_volume, continuity_field, continuity_residual, drift_field,
                     estimate_density, fokker_planck_field, fokker_planck_residual, grid_points,
                     interior_mask, osmotic_field, osmotic_residual, partial, same_axes)
from errors import InsufficientSlices
from spacetime import METRIC_SIGNS, PhysicalConstants, complex_minkowski_dot, lower, minkowski_dot
from stochastic import (BOOTSTRAP_STREAM, CHUNK_SIZE, FORWARD, POINT_STREAM, PathEnsemble,
                        RngStream, increment_residuals, quadratic_variation)
from wavefunction import (PolynomialGauge, PotentialModel, WaveFunctionModel, check_pairing,
                          complex_velocity, curl_identity_residual, drift_velocities, eom_residual,
                          gauge_transform, hat_force, kg_ratio, kg_residual, phi_derivatives)

log = logging.getLogger("stochastic_kg.checks")

MACHINE = "machine"
FD_ERROR = "fd-error"
BOOTSTRAP_SE = "bootstrap-se"
BASES = (MACHINE, FD_ERROR, BOOTSTRAP_SE)

N_RESAMPLES = 200
N_SE = 3.0
MACHINE_TOLERANCE = 1e-10
ROUNDOFF = 1e-12
EHRENFEST_RELATIVE = 0.05
EHRENFEST_MIN_SLICES = 5
WIENER_RELATIVE = 0.05
WIENER_MEAN_SE = 5.0
KG_TOLERANCE = 1e-9
EOM_TOLERANCE = 1e-5
CURL_TOLERANCE = 1e-6
GAUGE_TOLERANCE = 1e-10
RELATION_STEP = 1e-4
ACTION_RELATIVE = 1e-3
CURRENT_TOLERANCE = 0.05
N_POINTS = 20


@dataclass(frozen=True)
class CheckReport:
    """Outcome of one check; `passed` compares statistic to target within tolerance"""
    name: str
    statistic: float
    target: float
    tolerance: float
    basis: str
    passed: bool
    se: Optional[float] = None
    expected_fail: bool = False
    provenance: Dict[str, object] = field(default_factory=dict)
    details: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.basis not in BASES:
            raise ValueError(f"unknown tolerance basis {self.basis!r}")
        if self.basis == BOOTSTRAP_SE and self.passed and self.se is None:
            raise ValueError("a bootstrap-se pass must carry its standard error")
        object.__setattr__(self, "statistic", float(self.statistic))
        object.__setattr__(self, "target", float(self.target))
        object.__setattr__(self, "tolerance", float(self.tolerance))
        object.__setattr__(self, "passed", bool(self.passed))
        if self.se is not None:
            object.__setattr__(self, "se", float(self.se))

    @property
    def outcome_ok(self) -> bool:
        """Pass for ordinary checks, fail for negative controls"""
        return self.passed != self.expected_fail

    def labelled(self, name: Optional[str] = None, expected_fail: Optional[bool] = None,
                 **provenance) -> "CheckReport":
        return dataclasses.replace(
            self,
            name=self.name if name is None else name,
            expected_fail=self.expected_fail if expected_fail is None else expected_fail,
            provenance={**self.provenance, **provenance})

    def to_dict(self) -> dict:
        return plain({
            "kind": "check", "name": self.name, "statistic": self.statistic,
            "target": self.target, "tolerance": self.tolerance, "basis": self.basis,
            "passed": self.passed, "se": self.se, "expected_fail": self.expected_fail,
            "outcome_ok": self.outcome_ok, "provenance": self.provenance,
            "details": self.details,
        })


def plain(value):
    """JSON-friendly copy: numpy to python, complex to [re, im], non-finite floats to None"""
    if isinstance(value, dict):
        return {str(k): plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return plain(value.tolist())
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (complex, np.complexfloating)):
        return [plain(float(value.real)), plain(float(value.imag))]
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


# ---------------------------------------------------------------------------
# Test fields for the partial-integration lemma and the action variation
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ConstantField:
    """alpha^a(x) = const"""
    vector: Tuple[complex, ...] = (0j, 0j, 0j, 0j)

    def value(self, x):
        return np.broadcast_to(np.asarray(self.vector, dtype=complex), np.shape(x)).copy()

    def jacobian(self, x):
        return np.zeros(np.shape(x)[:-1] + (4, 4), dtype=complex)

    def wave(self, x):
        return np.zeros(np.shape(x), dtype=complex)


@dataclass(frozen=True, eq=False)
class CoordinateField:
    """alpha^a(x) = x^a"""

    def value(self, x):
        return np.asarray(x, dtype=complex)

    def jacobian(self, x):
        return np.broadcast_to(np.eye(4, dtype=complex), np.shape(x)[:-1] + (4, 4)).copy()

    def wave(self, x):
        return np.zeros(np.shape(x), dtype=complex)


@dataclass(frozen=True, eq=False)
class TrigonometricField:
    """alpha^a(x) = sum_m amplitude[m, a] exp(i kappa[m] . x), kappa in plain components"""
    amplitudes: np.ndarray
    wavenumbers: np.ndarray

    def __post_init__(self):
        amps = np.atleast_2d(np.asarray(self.amplitudes, dtype=complex))
        kappa = np.atleast_2d(np.asarray(self.wavenumbers, dtype=float))
        if amps.shape != kappa.shape or amps.shape[-1] != 4:
            raise ValueError("amplitudes and wavenumbers must both have shape (m, 4)")
        object.__setattr__(self, "amplitudes", amps)
        object.__setattr__(self, "wavenumbers", kappa)

    @classmethod
    def random(cls, gen: np.random.Generator, periods: Sequence[float], n_terms: int = 3,
               max_harmonic: int = 2, active: Sequence[int] = (0, 3),
               amplitude: float = 1.0) -> "TrigonometricField":
        """Random trigonometric polynomial periodic on the window lengths `periods`"""
        kappa = np.zeros((n_terms, 4))
        for index in active:
            harmonics = gen.integers(-max_harmonic, max_harmonic + 1, size=n_terms)
            kappa[:, index] = 2.0 * np.pi * harmonics / periods[index]
        amps = amplitude * (gen.standard_normal((n_terms, 4)) + 1j * gen.standard_normal((n_terms, 4)))
        return cls(amps, kappa)

    def _terms(self, x):
        return np.exp(1j * np.asarray(x, dtype=float) @ self.wavenumbers.T)

    def value(self, x):
        return self._terms(x) @ self.amplitudes

    def jacobian(self, x):
        return np.einsum("...m,mb,ma->...ba", self._terms(x), 1j * self.wavenumbers, self.amplitudes)

    def wave(self, x):
        box = -np.einsum("mi,i->m", self.wavenumbers ** 2, METRIC_SIGNS)
        return self._terms(x) @ (box[:, None] * self.amplitudes)


def mean_derivative(V: np.ndarray, field_, x, lambda2: float, star: bool = False) -> np.ndarray:
    """D_tau alpha = V.d alpha + (i lambda^2/2) box alpha; the starred form uses V* and -i"""
    velocity = np.conj(V) if star else V
    sign = -1.0 if star else 1.0
    return (np.einsum("...n,...na->...a", velocity, field_.jacobian(x))
            + sign * 0.5j * lambda2 * field_.wave(x))


# ---------------------------------------------------------------------------
# Bootstrap and evaluation helpers
# ---------------------------------------------------------------------------

def resample_counts(n: int, master_seed: int, n_resamples: int = N_RESAMPLES,
                    stream: int = 0) -> Iterator[np.ndarray]:
    """Multiplicities of each path in successive bootstrap resamples"""
    gen = RngStream(master_seed, stream, BOOTSTRAP_STREAM).generator
    for _ in range(n_resamples):
        yield np.bincount(gen.integers(0, n, size=n), minlength=n).astype(float)


def bootstrap_se(per_path: np.ndarray, master_seed: int, n_resamples: int = N_RESAMPLES,
                 stream: int = 0) -> np.ndarray:
    """Standard error of the mean over paths (axis 0) of real per-path values"""
    values = np.asarray(per_path, dtype=float)
    n = values.shape[0]
    if n < 2:
        return np.full(values.shape[1:], np.inf)
    flat = values.reshape(n, -1)
    draws = np.array([counts @ flat / n for counts in resample_counts(n, master_seed, n_resamples, stream)])
    return draws.std(axis=0, ddof=1).reshape(values.shape[1:])


def _seed(ensemble: PathEnsemble) -> int:
    return int(ensemble.provenance.get("master_seed", 0))


def _resolve(ensemble: PathEnsemble, model, A, consts):
    model = ensemble.model if model is None else model
    A = ensemble.potential if A is None else A
    check_pairing(model, A, consts)
    return model, A, model.consts


def _per_path(ensemble: PathEnsemble, fn: Callable[[np.ndarray], np.ndarray],
              paths: Optional[np.ndarray] = None) -> np.ndarray:
    """fn applied to blocks of paths (n, T, 4) and concatenated"""
    paths = ensemble.paths if paths is None else paths
    blocks = [fn(paths[start:start + CHUNK_SIZE]) for start in range(0, paths.shape[0], CHUNK_SIZE)]
    return np.concatenate(blocks)


def _provenance(ensemble: Optional[PathEnsemble] = None, **extra) -> dict:
    out = {}
    if ensemble is not None:
        out.update({"n_paths": ensemble.n_paths, "n_slices": ensemble.n_slices,
                    "dtau": ensemble.dtau, "direction": ensemble.direction,
                    "master_seed": _seed(ensemble)})
    out.update(extra)
    return out


def _lorentz_values(model, A, points):
    velocity = complex_velocity(model, A, points, on_node="nan")
    return np.real(complex_minkowski_dot(np.conj(velocity), velocity))


def _verdict(name: str, diff: np.ndarray, se: np.ndarray, allowed: np.ndarray):
    """Worst component by |diff| / allowed"""
    diff, allowed = np.abs(np.atleast_1d(diff)), np.atleast_1d(allowed)
    ratio = np.where(allowed > 0.0, diff / np.where(allowed > 0.0, allowed, 1.0),
                     np.where(diff > 0.0, np.inf, 0.0))
    worst = int(np.argmax(ratio))
    passed = bool(np.all(diff <= allowed))
    log.info("%s: %s (worst component %d, |diff| %.3e, allowed %.3e)", name,
             "pass" if passed else "FAIL", worst, diff[worst], allowed[worst])
    return worst, passed


# ---------------------------------------------------------------------------
# Ensemble checks
# ---------------------------------------------------------------------------

def lorentz_invariant_estimate(ensemble: PathEnsemble, model: Optional[WaveFunctionModel] = None,
                               A: Optional[PotentialModel] = None,
                               consts: Optional[PhysicalConstants] = None,
                               n_se: float = N_SE) -> CheckReport:
    """Monte Carlo mean of V*.V over every (path, tau) sample against c^2"""
    model, A, consts = _resolve(ensemble, model, A, consts)
    target = consts.c ** 2
    values = _per_path(ensemble, lambda pts: _lorentz_values(model, A, pts))
    excluded = int(np.count_nonzero(np.isnan(values)))
    usable = ~np.all(np.isnan(values), axis=1)
    if not np.any(usable):
        raise InsufficientSlices("every sample sits on a node of the wave function")
    per_path = np.nanmean(values[usable], axis=1)
    mean = float(np.mean(per_path))
    finite = values[np.isfinite(values)]
    details = {"excluded_node_points": excluded, "samples": int(finite.size)}
    provenance = _provenance(ensemble)
    if float(np.ptp(finite)) <= MACHINE_TOLERANCE * target:
        tolerance = MACHINE_TOLERANCE * target
        return CheckReport("lorentz_invariant", mean, target, tolerance, MACHINE,
                           abs(mean - target) <= tolerance, se=0.0, provenance=provenance,
                           details=details)
    se = float(bootstrap_se(per_path, _seed(ensemble)))
    _, passed = _verdict("lorentz_invariant", mean - target, se, n_se * se)
    return CheckReport("lorentz_invariant", mean, target, n_se * se, BOOTSTRAP_SE, passed, se=se,
                       provenance=provenance, details=details)


def energy_constancy_check(ensemble: PathEnsemble, model: Optional[WaveFunctionModel] = None,
                           A: Optional[PotentialModel] = None,
                           consts: Optional[PhysicalConstants] = None,
                           n_se: float = N_SE) -> CheckReport:
    """
    Least-squares slope of E[V*.V](tau) against zero. The source term
    -(lambda^2 e/m0) E[Im V_mu d_nu F^{mu nu}] is reported as details["analytic_rate"] only.
    """
    model, A, consts = _resolve(ensemble, model, A, consts)
    if ensemble.n_slices < 3:
        raise InsufficientSlices("energy constancy needs at least 3 tau slices")
    tau = ensemble.tau_grid
    centred = tau - tau.mean()
    weights = centred / np.sum(centred ** 2)

    def evaluate(points):
        velocity = complex_velocity(model, A, points)
        energy = np.real(complex_minkowski_dot(np.conj(velocity), velocity))
        source = np.einsum("...m,...m->...", lower(velocity.imag), A.field_divergence(points))
        return np.stack([energy, source], axis=-1)

    values = _per_path(ensemble, evaluate)
    per_path_slope = values[..., 0] @ weights
    slope = float(np.mean(per_path_slope))
    rate = -consts.lambda2 * consts.e / consts.m0 * float(np.mean(values[..., 1]))
    target = consts.c ** 2
    span = float(tau[-1] - tau[0])
    details = {"analytic_rate": rate, "slice_means": values[..., 0].mean(axis=0)}
    provenance = _provenance(ensemble)
    if float(np.ptp(values[..., 0])) <= MACHINE_TOLERANCE * target:
        tolerance = MACHINE_TOLERANCE * target / span
        return CheckReport("energy_constancy", slope, 0.0, tolerance, MACHINE,
                           abs(slope) <= tolerance, se=0.0, provenance=provenance, details=details)
    se = float(bootstrap_se(per_path_slope, _seed(ensemble)))
    _, passed = _verdict("energy_constancy", slope, se, n_se * se)
    return CheckReport("energy_constancy", slope, 0.0, n_se * se, BOOTSTRAP_SE, passed, se=se,
                       provenance=provenance, details=details)


def family_n_se(n_se: float, n_comparisons: int) -> float:
    """Bonferroni multiplier keeping the family-wise level of a single n_se comparison"""
    if n_comparisons <= 1:
        return float(n_se)
    normal = NormalDist()
    alpha = 2.0 * (1.0 - normal.cdf(n_se))
    return max(float(n_se), normal.inv_cdf(1.0 - alpha / (2.0 * n_comparisons)))


def ehrenfest_check(ensemble: PathEnsemble, model: Optional[WaveFunctionModel] = None,
                    A: Optional[PotentialModel] = None, consts: Optional[PhysicalConstants] = None,
                    stride: int = 1, n_se: float = N_SE, relative: float = EHRENFEST_RELATIVE,
                    force_scale: float = 1.0) -> CheckReport:
    """
    m0 d^2/dtau^2 E[x] against E[Re f], slice by slice and component by component.
    The left side is the per-path second difference with stride s; the right side
    is the force smoothed with the matching hat kernel (s - |j|) / s^2. Every
    interior slice must agree within max(z se, relative * max|rhs|), z being the
    Bonferroni multiplier over all slice-component pairs.
    """
    model, A, consts = _resolve(ensemble, model, A, consts)
    n_slices, s = ensemble.n_slices, int(stride)
    if s < 1 or n_slices - 2 * s < EHRENFEST_MIN_SLICES:
        raise InsufficientSlices(f"stride {s} leaves fewer than {EHRENFEST_MIN_SLICES} interior "
                                 f"slices out of {n_slices}")
    step = s * ensemble.dtau
    force = _per_path(ensemble, lambda pts: np.real(hat_force(model, A, pts)) / consts.m0)
    paths = ensemble.paths
    centre = np.arange(s, n_slices - s)
    lhs = (paths[:, centre + s] - 2.0 * paths[:, centre] + paths[:, centre - s]) / step ** 2
    rhs = np.zeros_like(lhs)
    for j in range(-s + 1, s):
        rhs += (s - abs(j)) / s ** 2 * force[:, centre + j]
    rhs *= force_scale

    per_path = lhs - rhs
    diff = per_path.mean(axis=0)
    se = bootstrap_se(per_path, _seed(ensemble))
    lhs_slices, rhs_slices = lhs.mean(axis=0), rhs.mean(axis=0)
    scale = np.max(np.abs(rhs_slices), axis=0)
    floor = ROUNDOFF * max(1.0, float(np.max(np.abs(paths)))) / step ** 2
    z = family_n_se(n_se, diff.size)
    allowed = np.maximum(np.maximum(z * se, relative * scale[None, :]), floor)
    worst, passed = _verdict("ehrenfest", diff.ravel(), se.ravel(), allowed.ravel())
    slot, component = np.unravel_index(worst, diff.shape)
    log.debug("ehrenfest: %d slices x 4 components, family multiplier %.2f, worst at tau=%.3f mu=%d",
              centre.size, z, ensemble.tau_grid[centre[slot]], component)
    details = {"lhs": lhs_slices.mean(axis=0), "rhs": rhs_slices.mean(axis=0),
               "diff_per_slice": diff, "se_per_slice": se, "allowed_per_slice": allowed,
               "lhs_per_slice": lhs_slices, "rhs_per_slice": rhs_slices, "rhs_scale": scale,
               "n_se_family": z, "stride": s, "force_scale": force_scale,
               "slices": ensemble.tau_grid[centre],
               "worst": {"tau": float(ensemble.tau_grid[centre[slot]]), "component": int(component)}}
    return CheckReport("ehrenfest", abs(diff[slot, component]), 0.0, allowed[slot, component],
                       BOOTSTRAP_SE, passed, se=float(se[slot, component]),
                       provenance=_provenance(ensemble), details=details)


def mean_velocity_check(ensemble: PathEnsemble, model: Optional[WaveFunctionModel] = None,
                        A: Optional[PotentialModel] = None,
                        consts: Optional[PhysicalConstants] = None,
                        n_se: float = N_SE) -> CheckReport:
    """d/dtau E[x] = E[Re V] and E[V+] = E[V-] (equivalently E[Im V] = 0)"""
    model, A, consts = _resolve(ensemble, model, A, consts)
    if ensemble.n_slices < 2:
        raise InsufficientSlices("mean velocity needs at least 2 tau slices")
    paths, dtau = ensemble.paths, ensemble.dtau
    anchors = paths[:, :-1] if ensemble.direction == FORWARD else paths[:, 1:]
    velocity = _per_path(ensemble, lambda pts: complex_velocity(model, A, pts), paths=anchors)
    displacement = np.diff(paths, axis=1) / dtau
    per_path = np.concatenate([(displacement - velocity.real).mean(axis=1),
                               2.0 * velocity.imag.mean(axis=1)], axis=1)
    diff = per_path.mean(axis=0)
    se = bootstrap_se(per_path, _seed(ensemble))
    floor = ROUNDOFF * max(1.0, float(np.max(np.abs(paths)))) / dtau
    allowed = np.maximum(n_se * se, floor)
    worst, passed = _verdict("mean_velocity", diff, se, allowed)
    details = {"velocity_gap": diff[:4], "drift_asymmetry": diff[4:], "se": se,
               "mean_re_velocity": velocity.real.mean(axis=(0, 1))}
    return CheckReport("mean_velocity", abs(diff[worst]), 0.0, allowed[worst], BOOTSTRAP_SE, passed,
                       se=float(se[worst]), provenance=_provenance(ensemble), details=details)


def ito_trace(ensemble: PathEnsemble) -> float:
    """lambda^2 g_{mu mu} summed over the diffusing components; the gap of the coordinate field"""
    return float(ensemble.lam ** 2 * np.sum(METRIC_SIGNS))


def partial_integration_check(ensemble: PathEnsemble, alpha, beta,
                              model: Optional[WaveFunctionModel] = None,
                              A: Optional[PotentialModel] = None,
                              consts: Optional[PhysicalConstants] = None,
                              expected_gap: complex = 0.0, n_se: float = N_SE) -> CheckReport:
    """
    d/dtau E[alpha.beta] against E[D alpha . beta + alpha . D* beta] and against
    E[D* alpha . beta + alpha . D beta]; LHS - RHS must equal `expected_gap`
    """
    model, A, consts = _resolve(ensemble, model, A, consts)
    if ensemble.n_slices < 3:
        raise InsufficientSlices("partial integration needs at least 3 tau slices")
    lambda2 = consts.lambda2

    def evaluate(points):
        V = complex_velocity(model, A, points)
        a, b = alpha.value(points), beta.value(points)
        da = mean_derivative(V, alpha, points, lambda2)
        da_star = mean_derivative(V, alpha, points, lambda2, star=True)
        db = mean_derivative(V, beta, points, lambda2)
        db_star = mean_derivative(V, beta, points, lambda2, star=True)
        return np.stack([complex_minkowski_dot(a, b),
                         complex_minkowski_dot(da, b) + complex_minkowski_dot(a, db_star),
                         complex_minkowski_dot(da_star, b) + complex_minkowski_dot(a, db)], axis=-1)

    values = _per_path(ensemble, evaluate)
    lhs = (values[:, 2:, 0] - values[:, :-2, 0]) / (2.0 * ensemble.dtau)
    gaps = [(lhs - values[:, 1:-1, k]).mean(axis=1) for k in (1, 2)]
    per_path = np.stack([gaps[0].real, gaps[0].imag, gaps[1].real, gaps[1].imag], axis=1)
    expected = complex(expected_gap)
    target = np.array([expected.real, expected.imag, expected.real, expected.imag])
    measured = per_path.mean(axis=0)
    se = bootstrap_se(per_path, _seed(ensemble))
    floor = ROUNDOFF * max(1.0, float(np.max(np.abs(values[..., 0])))) / ensemble.dtau
    allowed = np.maximum(n_se * se, floor)
    worst, passed = _verdict("partial_integration", measured - target, se, allowed)
    details = {"gap_forward_star": measured[:2], "gap_star_forward": measured[2:], "se": se,
               "lhs": lhs.mean(axis=0).real.mean(), "expected_gap": [expected.real, expected.imag]}
    return CheckReport("partial_integration", measured[worst], target[worst], allowed[worst],
                       BOOTSTRAP_SE, passed, se=float(se[worst]),
                       provenance=_provenance(ensemble), details=details)


def wiener_law_check(ensemble: PathEnsemble, relative: float = WIENER_RELATIVE,
                     n_se: float = WIENER_MEAN_SE) -> CheckReport:
    """Recovered increments: covariance delta dtau within `relative`, means within n_se SE"""
    residuals = increment_residuals(ensemble)
    dtau = ensemble.dtau
    pooled = residuals.reshape(-1, 4)
    covariance = np.cov(pooled, rowvar=False)
    cov_error = float(np.max(np.abs(covariance - np.eye(4) * dtau)))
    per_path = residuals.mean(axis=1)
    means = per_path.mean(axis=0)
    se = bootstrap_se(per_path, _seed(ensemble))
    worst_mean, means_ok = _verdict("wiener_law means", means, se, n_se * se)
    passed = means_ok and cov_error <= relative * dtau
    details = {"covariance": covariance, "mean": means, "se": se, "count": int(pooled.shape[0])}
    return CheckReport("wiener_law", cov_error, 0.0, relative * dtau, BOOTSTRAP_SE, passed,
                       se=float(se[worst_mean]), provenance=_provenance(ensemble), details=details)


def quadratic_variation_check(ensemble: PathEnsemble, relative: float = WIENER_RELATIVE) -> CheckReport:
    """sum dx dx / span against lambda^2 delta + dtau E[V V] (the exact Euler-Maruyama moment)"""
    if ensemble.n_slices < 2:
        raise InsufficientSlices("quadratic variation needs at least 2 tau slices")
    paths, dtau = ensemble.paths, ensemble.dtau
    measured = quadratic_variation(ensemble)
    anchors = paths[:, :-1] if ensemble.direction == FORWARD else paths[:, 1:]
    model, A = ensemble.model, ensemble.potential

    def drift(points):
        plus, minus = drift_velocities(complex_velocity(model, A, points))
        return ensemble.drift_scale * (plus if ensemble.direction == FORWARD else minus)

    v = _per_path(ensemble, drift, paths=anchors).reshape(-1, 4)
    expected = ensemble.lam ** 2 * np.eye(4) + dtau * (v.T @ v) / v.shape[0]
    error = float(np.max(np.abs(measured - expected)))
    scale = max(ensemble.lam ** 2, ROUNDOFF)
    passed = error <= relative * scale
    log.info("quadratic_variation: %s (max entry error %.3e)", "pass" if passed else "FAIL", error)
    return CheckReport("quadratic_variation", error, 0.0, relative * scale, FD_ERROR, passed,
                       provenance=_provenance(ensemble),
                       details={"measured": measured, "expected": expected})


# ---------------------------------------------------------------------------
# Action stationarity
# ---------------------------------------------------------------------------

def action_stationarity_check(model: WaveFunctionModel, A: PotentialModel, perturbation,
                              axes: Axes, consts: Optional[PhysicalConstants] = None,
                              epsilons: Optional[Sequence[float]] = None, epsilon_max: float = 1e-2,
                              fixed: Sequence[float] = (0.0, 0.0, 0.0, 0.0), degree: int = 4,
                              relative: float = ACTION_RELATIVE) -> CheckReport:
    """
    S(eps) = sum_grid p [(m0/2) V_eps*.V_eps - e A(x + eps eta).Re V_eps] with
    V_eps = V + eps D_tau eta, for a real displacement field eta. The linear
    coefficient of the fitted polynomial vanishes on Klein-Gordon solutions.
    """
    check_pairing(model, A, consts)
    consts = model.consts
    if epsilons is None:
        epsilons = np.linspace(-epsilon_max, epsilon_max, 9)
    eps = np.asarray(epsilons, dtype=float)
    eps_max = float(np.max(np.abs(eps)))
    if eps.size < degree + 1:
        raise ValueError(f"need at least {degree + 1} epsilon values for a degree-{degree} fit")

    grid = analytic_density(model, axes, (0.0,), fixed)
    p, points, volume = grid.values[0], grid.points(), grid.cell_volume
    V = complex_velocity(model, A, points)
    eta = np.real(perturbation.value(points))
    dV = (np.einsum("...n,...na->...a", V, np.real(perturbation.jacobian(points)))
          + 0.5j * consts.lambda2 * np.real(perturbation.wave(points)))

    def action(epsilon: float) -> float:
        velocity = V + epsilon * dV
        potential = A.value(points + epsilon * eta)
        lagrangian = (0.5 * consts.m0 * np.real(complex_minkowski_dot(np.conj(velocity), velocity))
                      - consts.e * minkowski_dot(potential, np.real(velocity)))
        return float(np.sum(p * lagrangian) * volume)

    actions = np.array([action(e) for e in eps])
    coeffs = np.polynomial.polynomial.polyfit(eps, actions, degree)
    c1, c2 = float(coeffs[1]), float(coeffs[2])
    tolerance = relative * abs(c2) * eps_max
    passed = abs(c1) <= tolerance and abs(c2) > ROUNDOFF * max(1.0, abs(float(coeffs[0])))

    F = A.field_tensor(points)
    invariant = np.einsum("...ab,a,b,...ab->...", F, METRIC_SIGNS, METRIC_SIGNS, F)
    field_action = float(np.sum(invariant) * volume) / (4.0 * consts.mu0 * consts.c)
    unperturbed = action(0.0)
    log.info("action_stationarity: %s (c1 %.3e, c2 %.3e)", "pass" if passed else "FAIL", c1, c2)
    details = {"epsilons": eps, "actions": actions, "coefficients": coeffs,
               "unperturbed_action": unperturbed, "field_action": field_action}
    return CheckReport("action_stationarity", c1, 0.0, tolerance, FD_ERROR, passed,
                       provenance={"bins": [a.n_bins for a in axes], "epsilon_max": eps_max},
                       details=details)


# ---------------------------------------------------------------------------
# Pointwise identities at seeded random points
# ---------------------------------------------------------------------------

def random_points(master_seed: int, low: Sequence[float], high: Sequence[float],
                  n_points: int = N_POINTS, stream: int = 0) -> np.ndarray:
    gen = RngStream(master_seed, stream, POINT_STREAM).generator
    return gen.uniform(np.asarray(low, dtype=float), np.asarray(high, dtype=float), size=(n_points, 4))


def _pointwise_report(name, statistic, tolerance, points, details=None, basis=MACHINE):
    passed = statistic <= tolerance
    log.info("%s: %s (%.3e, tolerance %.1e)", name, "pass" if passed else "FAIL", statistic, tolerance)
    return CheckReport(name, statistic, 0.0, tolerance, basis, passed,
                       provenance={"n_points": int(points.shape[0])}, details=details or {})


def kg_residual_check(model, A, points: np.ndarray, tolerance: float = KG_TOLERANCE) -> CheckReport:
    """max |kg_residual / (m0^2 phi)| in units of c^2"""
    ratio = kg_ratio(model, A, points)
    statistic = float(np.max(np.abs(ratio))) / model.consts.c ** 2
    return _pointwise_report("kg_residual", statistic, tolerance, points)


def eom_residual_check(model, A, points: np.ndarray, tolerance: float = EOM_TOLERANCE) -> CheckReport:
    """max |m0 D_tau V - f-hat| in units of m0 c^2"""
    residual = eom_residual(model, A, points)
    statistic = float(np.max(np.abs(residual))) / (model.consts.m0 * model.consts.c ** 2)
    return _pointwise_report("eom_residual", statistic, tolerance, points)


def eom_kg_relation_check(model, A, points: np.ndarray, tolerance: float = EOM_TOLERANCE,
                          h: float = RELATION_STEP) -> CheckReport:
    """eom_residual against (m0/2) d^mu [kg_residual / (m0^2 phi)], the latter by central differences"""
    residual = eom_residual(model, A, points)
    shift = h * np.eye(4)
    up = kg_ratio(model, A, points[..., None, :] + shift)
    down = kg_ratio(model, A, points[..., None, :] - shift)
    expected = 0.5 * model.consts.m0 * METRIC_SIGNS * (up - down) / (2.0 * h)
    scale = max(float(np.max(np.abs(expected))), float(np.max(np.abs(residual))),
                model.consts.m0 * model.consts.c ** 2)
    statistic = float(np.max(np.abs(residual - expected))) / scale
    return _pointwise_report("eom_kg_relation", statistic, tolerance, points,
                             {"max_eom": float(np.max(np.abs(residual))), "scale": scale}, FD_ERROR)


def curl_identity_check(model, A, points: np.ndarray, tolerance: float = CURL_TOLERANCE) -> CheckReport:
    residual = curl_identity_residual(model, A, points)
    return _pointwise_report("curl_identity", float(np.max(np.abs(residual))), tolerance, points)


def _kg_current(model: WaveFunctionModel, A: PotentialModel, points: np.ndarray) -> np.ndarray:
    """e c lambda^2 Im(phi* D^mu phi), D_nu = d_nu - (i e / hbar) A_nu"""
    consts = model.consts
    phi, d1 = phi_derivatives(model, A, points, 1)
    covariant = d1 - 1j * consts.e / consts.hbar * lower(A.value(points)) * phi[..., None]
    return (consts.e * consts.c * consts.lambda2
            * METRIC_SIGNS * np.imag(np.conj(phi)[..., None] * covariant))


def gauge_invariance_check(model, A, gauge: PolynomialGauge, points: np.ndarray,
                           tolerance: float = GAUGE_TOLERANCE) -> CheckReport:
    """V, |kg_residual| and j_KG before and after the gauge transform, relative differences"""
    other_model, other_A = gauge_transform(model, A, gauge)
    differences = {}
    for key, fn in (("velocity", lambda m, a: complex_velocity(m, a, points)),
                    ("kg_magnitude", lambda m, a: np.abs(kg_residual(m, a, points))),
                    ("current", lambda m, a: _kg_current(m, a, points))):
        before, after = fn(model, A), fn(other_model, other_A)
        scale = max(1.0, float(np.max(np.abs(before))))
        differences[key] = float(np.max(np.abs(after - before))) / scale
    statistic = max(differences.values())
    return _pointwise_report("gauge_invariance", statistic, tolerance, points, differences)


# ---------------------------------------------------------------------------
# Density residual checks
# ---------------------------------------------------------------------------

DENSITY_KINDS = ("fokker_planck", "continuity", "osmotic")
_DEFAULT_DRIFT = {"fokker_planck": "vplus", "continuity": "re", "osmotic": "im"}


def _residual_field(kind: str, grid: DensityGrid, drift_values: np.ndarray, lam: float,
                    sign: int, mask_source: Optional[np.ndarray] = None):
    if kind == "fokker_planck":
        residual, _ = fokker_planck_field(grid, drift_values, lam, sign)
        return residual, interior_mask(grid.axes)
    if kind == "continuity":
        residual, _ = continuity_field(grid, drift_values)
        return residual, interior_mask(grid.axes)
    residual, _, _, mask = osmotic_field(grid, drift_values, lam)
    return np.moveaxis(residual, -1, 0), (mask if mask_source is None else mask_source)


def density_residual_check(kind: str, model: WaveFunctionModel, A: PotentialModel, axes: Axes,
                           ensemble: Optional[PathEnsemble] = None,
                           tau_indices: Optional[Sequence[int]] = None,
                           tau_values: Sequence[float] = (0.0, 0.5, 1.0),
                           fixed: Sequence[float] = (0.0, 0.0, 0.0, 0.0),
                           drift_kind: Optional[str] = None, drift_scale: float = 1.0,
                           lam_scale: float = 1.0, sign: Optional[int] = None,
                           tolerance: float = FD_TOLERANCE, n_se: float = N_SE,
                           n_resamples: int = N_RESAMPLES, pooled: bool = False) -> CheckReport:
    """
    Fokker-Planck, continuity or osmotic residual on an analytic grid (fd-error
    basis) or, when an ensemble is given, on its histogram with a bootstrap budget.
    `pooled` (osmotic only, stationary laws) histograms every selected slice into one
    grid; resampling stays over whole paths.
    """
    if kind not in DENSITY_KINDS:
        raise ValueError(f"density check kind must be one of {DENSITY_KINDS}")
    if pooled and (kind != "osmotic" or ensemble is None):
        raise ValueError("only the histogram osmotic check can pool tau slices")
    consts = model.consts
    if sign is None:
        sign = -1 if ensemble is not None and ensemble.direction != FORWARD else 1
    if drift_kind is None:
        drift_kind = _DEFAULT_DRIFT[kind]
        if kind == "fokker_planck" and sign < 0:
            drift_kind = "vminus"
    drift = drift_field(model, A, consts, drift_kind, drift_scale)
    lam = consts.lam * lam_scale
    details = {"kind": kind, "drift": drift_kind, "drift_scale": drift_scale,
               "lam_scale": lam_scale, "sign": sign}

    if ensemble is None:
        grid = analytic_density(model, axes, tau_values, fixed)
        drift_values = drift(grid.points())
        report = _density_report(kind, grid, drift_values, lam, sign, tolerance, None)
        details.update(report.as_dict())
        return CheckReport(kind, report.rms_residual, 0.0, report.tolerance, FD_ERROR,
                           report.passed, provenance={"bins": [a.n_bins for a in axes],
                                                      "source": ANALYTIC},
                           details=details)

    if tau_indices is not None:
        slots = list(tau_indices)
    elif pooled:
        slots = list(range(ensemble.n_slices))
    else:
        slots = _default_slots(kind, ensemble)
    indices = np.stack([bin_indices(ensemble.paths[:, slot], axes) for slot in slots], axis=1)
    repeats = 1
    if pooled:
        template = estimate_density(ensemble, axes, [slots[len(slots) // 2]], fixed)
        repeats = len(slots)
        indices = indices.reshape(-1, 1)
        grid = _weighted_grid(template, indices, np.ones(indices.shape[0]))
    else:
        grid = estimate_density(ensemble, axes, slots, fixed)
    drift_values = drift(grid.points())
    reference, reference_mask = _residual_field(kind, grid, drift_values, lam, sign)
    total = np.zeros_like(reference)
    squares = np.zeros_like(total)
    for counts in resample_counts(ensemble.n_paths, _seed(ensemble), n_resamples):
        resampled = _weighted_grid(grid, indices, np.repeat(counts, repeats))
        residual, _ = _residual_field(kind, resampled, drift_values, lam, sign, reference_mask)
        total += residual
        squares += residual ** 2
    mean = total / n_resamples
    variance = np.maximum(squares / n_resamples - mean ** 2, 0.0) * n_resamples / (n_resamples - 1)
    per_bin_se = np.sqrt(variance)[..., reference_mask]
    rms_se = float(np.sqrt(np.mean(per_bin_se ** 2)))
    budget = n_se * rms_se
    report = _density_report(kind, grid, drift_values, lam, sign, tolerance, budget)
    details.update(report.as_dict())
    details["rms_bootstrap_se"] = rms_se
    details["samples"] = int(indices.size)
    details["pooled"] = pooled
    return CheckReport(kind, report.rms_residual, 0.0, budget, BOOTSTRAP_SE, report.passed,
                       se=rms_se, provenance=_provenance(ensemble, source=HISTOGRAM,
                                                         tau_indices=slots),
                       details=details)


def _default_slots(kind: str, ensemble: PathEnsemble):
    middle = ensemble.n_slices // 2
    if kind == "osmotic":
        return [middle]
    if ensemble.n_slices < 3:
        raise InsufficientSlices(f"{kind} needs at least 3 tau slices")
    gap = max(1, ensemble.n_slices // 4)
    return [middle - gap, middle, middle + gap] if middle - gap >= 0 else [0, 1, 2]


def _weighted_grid(grid: DensityGrid, indices: np.ndarray, counts: np.ndarray) -> DensityGrid:
    n_cells = int(np.prod([a.n_bins for a in grid.axes]))
    shape = tuple(a.n_bins for a in grid.axes)
    values, raw, samples = [], [], []
    for slot in range(indices.shape[1]):
        column = indices[:, slot]
        valid = column >= 0
        hist = np.bincount(column[valid], weights=counts[valid], minlength=n_cells)
        n_in = float(hist.sum())
        values.append((hist / (n_in * grid.cell_volume)).reshape(shape))
        raw.append(hist.reshape(shape))
        samples.append(n_in)
    return DensityGrid(axes=grid.axes, values=np.stack(values), tau_values=grid.tau_values,
                       source=HISTOGRAM, fixed=grid.fixed, counts=np.stack(raw),
                       n_samples=np.asarray(samples))


def _density_report(kind, grid, drift_values, lam, sign, tolerance, budget):
    if kind == "fokker_planck":
        return fokker_planck_residual(grid, drift_values, lam, sign, tolerance, budget)
    if kind == "continuity":
        return continuity_residual(grid, drift_values, tolerance, budget)
    return osmotic_residual(grid, drift_values, lam, tolerance, budget)


# ---------------------------------------------------------------------------
# Currents
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CurrentField:
    """j^mu on the bins of `axes`, shape (*bins, 4)"""
    axes: Axes
    values: np.ndarray
    fixed: Tuple[float, ...] = (0.0, 0.0, 0.0, 0.0)
    source: str = ANALYTIC
    sample_indices: Optional[np.ndarray] = None
    sample_weights: Optional[np.ndarray] = None
    normalization: str = ""

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        shape = tuple(a.n_bins for a in self.axes) + (4,)
        if values.shape != shape:
            raise ValueError(f"current values must have shape {shape}, got {values.shape}")
        values.setflags(write=False)
        object.__setattr__(self, "axes", tuple(self.axes))
        object.__setattr__(self, "values", values)

    def resampled(self, counts: np.ndarray) -> "CurrentField":
        """Histogram rebuilt with per-path multiplicities"""
        if self.sample_indices is None:
            raise ValueError("only histogram currents can be resampled")
        values = _current_histogram(self.axes, self.sample_indices, self.sample_weights, counts)
        return CurrentField(self.axes, values, self.fixed, HISTOGRAM, normalization=self.normalization)


def _current_histogram(axes: Axes, indices: np.ndarray, weights: np.ndarray,
                       counts: Optional[np.ndarray] = None) -> np.ndarray:
    n_cells = int(np.prod([a.n_bins for a in axes]))
    multiplicity = np.ones(indices.shape) if counts is None else np.broadcast_to(
        counts[:, None], indices.shape)
    valid = indices >= 0
    flat, mult = indices[valid], multiplicity[valid]
    total = float(np.sum(multiplicity))
    columns = [np.bincount(flat, weights=mult * weights[..., mu][valid], minlength=n_cells)
               for mu in range(4)]
    values = np.stack(columns, axis=-1) / (total * cell_volume(axes))
    return values.reshape(tuple(a.n_bins for a in axes) + (4,))


def compute_j_stochastic(ensemble: PathEnsemble, axes: Axes,
                         model: Optional[WaveFunctionModel] = None,
                         A: Optional[PotentialModel] = None,
                         consts: Optional[PhysicalConstants] = None,
                         fixed: Sequence[float] = (0.0, 0.0, 0.0, 0.0)) -> CurrentField:
    """Histogram of every (path, tau) sample weighted by -e c Re V^mu, per sample and cell volume"""
    model, A, consts = _resolve(ensemble, model, A, consts)
    prefactor = -consts.e * consts.c
    weights = _per_path(ensemble, lambda pts: prefactor * complex_velocity(model, A, pts).real)
    indices = bin_indices(ensemble.paths, axes)
    values = _current_histogram(axes, indices, weights)
    return CurrentField(tuple(axes), values, tuple(fixed), HISTOGRAM, indices, weights,
                        normalization="per (path, tau) sample and unit cell volume")


def compute_j_kg(model: WaveFunctionModel, A: PotentialModel, axes: Axes,
                 consts: Optional[PhysicalConstants] = None,
                 fixed: Sequence[float] = (0.0, 0.0, 0.0, 0.0)) -> CurrentField:
    """-(i e c lambda^2 / 2) g^{mu nu} [phi* D_nu phi - phi (D_nu phi)*] at the bin centres"""
    check_pairing(model, A, consts)
    values = _kg_current(model, A, grid_points(axes, fixed))
    return CurrentField(tuple(axes), values, tuple(fixed), ANALYTIC,
                        normalization="unnormalized phi* phi")


def _active_values(j: CurrentField) -> np.ndarray:
    return j.values[..., [a.index for a in j.axes]]


def _equivalence(js: np.ndarray, jkg: np.ndarray) -> Tuple[float, float]:
    denom = float(np.sum(jkg * jkg))
    norm = float(np.sqrt(np.sum(js * js)))
    if denom == 0.0:
        return 0.0, 0.0 if norm == 0.0 else 1.0
    constant = float(np.sum(js * jkg)) / denom
    deviation = float(np.sqrt(np.sum((js - constant * jkg) ** 2))) / norm if norm > 0.0 else 0.0
    return constant, deviation


def current_equivalence_check(js: CurrentField, jkg: CurrentField,
                              tolerance: float = CURRENT_TOLERANCE, master_seed: int = 0,
                              n_resamples: int = N_RESAMPLES) -> CheckReport:
    """Least-squares constant c with js ~ c jkg over interior bins and the relative L2 deviation"""
    same_axes(js.axes, jkg.axes)
    mask = interior_mask(js.axes)
    constant, deviation = _equivalence(js.values[mask], jkg.values[mask])
    details = {"constant": constant}
    passed = deviation <= tolerance
    log.info("current_equivalence: %s (deviation %.3e, constant %.6g)",
             "pass" if passed else "FAIL", deviation, constant)
    if js.sample_indices is None:
        return CheckReport("current_equivalence", deviation, 0.0, tolerance, MACHINE, passed,
                           provenance={"source": js.source}, details=details)
    n_paths = js.sample_indices.shape[0]
    draws = [_equivalence(js.resampled(counts).values[mask], jkg.values[mask])[1]
             for counts in resample_counts(n_paths, master_seed, n_resamples)]
    se = float(np.std(draws, ddof=1))
    details["deviation_se"] = se
    return CheckReport("current_equivalence", deviation, 0.0, tolerance, BOOTSTRAP_SE, passed,
                       se=se, provenance={"source": js.source, "n_paths": n_paths},
                       details=details)


def current_divergence(j: CurrentField) -> Tuple[np.ndarray, list]:
    """d_mu j^mu over the active axes and the individual terms"""
    terms = [partial(j.values[None, ..., axis.index], position, axis)[0]
             for position, axis in enumerate(j.axes)]
    return sum(terms), terms


def charge_conservation_check(j: CurrentField, tolerance: float = FD_TOLERANCE,
                              n_se: float = N_SE, master_seed: int = 0,
                              n_resamples: int = N_RESAMPLES) -> CheckReport:
    """RMS of d_mu j^mu over interior bins; fd-error basis analytically, bootstrap for histograms"""
    mask = interior_mask(j.axes)
    divergence, terms = current_divergence(j)
    rms = float(np.sqrt(np.mean(divergence[mask] ** 2)))
    # |j| per unit window length keeps the scale positive when every term vanishes
    window = min(a.high - a.low for a in j.axes)
    magnitude = float(np.sqrt(np.mean(_active_values(j)[mask] ** 2))) / window
    scale = max([float(np.sqrt(np.mean(t[mask] ** 2))) for t in terms] + [magnitude])
    details = {"scale": scale, "max_divergence": float(np.max(np.abs(divergence[mask])))}
    if j.sample_indices is None:
        limit = tolerance * scale
        passed = rms <= limit
        log.info("charge_conservation: %s (rms %.3e, limit %.3e)", "pass" if passed else "FAIL",
                 rms, limit)
        return CheckReport("charge_conservation", rms, 0.0, limit, FD_ERROR, passed,
                           provenance={"source": j.source}, details=details)
    n_paths = j.sample_indices.shape[0]
    draws = np.array([current_divergence(j.resampled(counts))[0][mask]
                      for counts in resample_counts(n_paths, master_seed, n_resamples)])
    rms_se = float(np.sqrt(np.mean(draws.std(axis=0, ddof=1) ** 2)))
    budget = n_se * rms_se
    passed = rms <= budget
    log.info("charge_conservation: %s (rms %.3e, budget %.3e)", "pass" if passed else "FAIL",
             rms, budget)
    details["rms_bootstrap_se"] = rms_se
    return CheckReport("charge_conservation", rms, 0.0, budget, BOOTSTRAP_SE, passed, se=rms_se,
                       provenance={"source": j.source, "n_paths": n_paths}, details=details)
