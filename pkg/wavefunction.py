"""
Closed-form Klein-Gordon solutions, external four-potentials and the complex
velocity calculus built on them (V, V-hat, D_tau, gauge transforms, residuals)
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from errors import IncompatiblePair, NodeSingularity, OffShellMomentum
from spacetime import (METRIC_SIGNS, ComplexFourVector, FieldTensor, FourVector,
                       NATURAL_UNITS, PhysicalConstants, lower,
                       minkowski_dot)

log = logging.getLogger("stochastic_kg.wavefunction")

# Defaults
NODE_EPSILON = 1e-10
FD_STEP = 1e-3
ON_SHELL_TOLERANCE = 1e-12
TRANSVERSE_TOLERANCE = 1e-12

ANALYTIC = "analytic"
FINITE_DIFFERENCE = "fd"

_EYE = np.eye(4)


# ---------------------------------------------------------------------------
# Field profiles f(xi) of a plane-wave potential, xi = k.x
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CosineProfile:
    """f = cos(xi + phase); laser carrier"""
    phase: float = 0.0
    kind = "cosine"

    def derivatives(self, xi):
        arg = xi + self.phase
        c, s = np.cos(arg), np.sin(arg)
        return c, -s, -c

    def integrals(self, xi):
        arg = xi + self.phase
        return np.sin(arg), arg / 2.0 + np.sin(2.0 * arg) / 4.0

    def descriptor(self) -> dict:
        return {"profile": self.kind, "phase": self.phase}


@dataclass(frozen=True)
class LinearProfile:
    """f = xi; constant crossed field"""
    kind = "linear"

    def derivatives(self, xi):
        xi = np.asarray(xi, dtype=float)
        return xi, np.ones_like(xi), np.zeros_like(xi)

    def integrals(self, xi):
        xi = np.asarray(xi, dtype=float)
        return xi ** 2 / 2.0, xi ** 3 / 3.0

    def descriptor(self) -> dict:
        return {"profile": self.kind}


Profile = Union[CosineProfile, LinearProfile]


# ---------------------------------------------------------------------------
# Potentials
# ---------------------------------------------------------------------------

class PotentialModel:
    """External four-potential A^mu(x) with analytic derivatives"""

    def value(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        """J[..., beta, alpha] = d_beta A^alpha"""
        raise NotImplementedError

    def field_tensor(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def field_divergence(self, x: np.ndarray) -> np.ndarray:
        """d_nu F^{mu nu}"""
        raise NotImplementedError

    def wave_operator(self, x: np.ndarray) -> np.ndarray:
        """d_nu d^nu A^mu"""
        raise NotImplementedError

    def lorenz_divergence(self, x: np.ndarray) -> np.ndarray:
        """d_mu A^mu"""
        raise NotImplementedError

    def descriptor(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class ZeroPotential(PotentialModel):
    """A = 0"""

    def value(self, x):
        return np.zeros(np.shape(x))

    def jacobian(self, x):
        return np.zeros(np.shape(x)[:-1] + (4, 4))

    def field_tensor(self, x):
        return np.zeros(np.shape(x)[:-1] + (4, 4))

    def field_divergence(self, x):
        return np.zeros(np.shape(x))

    def wave_operator(self, x):
        return np.zeros(np.shape(x))

    def lorenz_divergence(self, x):
        return np.zeros(np.shape(x)[:-1])

    def descriptor(self) -> dict:
        return {"kind": "zero"}


@dataclass(frozen=True)
class ConstantFieldPotential(PotentialModel):
    """
    Uniform field F in the symmetric gauge A^mu = -1/2 F^{mu nu} x_nu. A field-tensor
    utility for Lorentz-force and gauge evaluations; no catalog wave function solves
    KG in it, so check_pairing rejects it for every model.
    """
    F: FieldTensor

    def value(self, x):
        return -0.5 * np.einsum("mn,...n->...m", self.F.matrix, lower(x))

    def jacobian(self, x):
        # d_beta A^alpha = -1/2 F^{alpha beta} g_{beta beta}
        jac = -0.5 * (self.F.matrix * METRIC_SIGNS[None, :]).T
        return np.broadcast_to(jac, np.shape(x)[:-1] + (4, 4)).copy()

    def field_tensor(self, x):
        return np.broadcast_to(self.F.matrix, np.shape(x)[:-1] + (4, 4)).copy()

    def field_divergence(self, x):
        return np.zeros(np.shape(x))

    def wave_operator(self, x):
        return np.zeros(np.shape(x))

    def lorenz_divergence(self, x):
        return np.zeros(np.shape(x)[:-1])

    def descriptor(self) -> dict:
        return {"kind": "constant_field", "field": self.F.matrix.tolist()}


@dataclass(frozen=True)
class PlaneWavePotential(PotentialModel):
    """A^mu = a^mu f(k.x) with k null and k.a = 0"""
    k: FourVector
    polarization: FourVector
    profile: Profile = CosineProfile()

    def __post_init__(self):
        k = self.k.as_array()
        scale = max(1.0, float(np.max(np.abs(k))) ** 2)
        if abs(minkowski_dot(self.k, self.k)) > ON_SHELL_TOLERANCE * scale:
            raise ValueError(f"wave vector is not null: k.k = {minkowski_dot(self.k, self.k)}")
        if k[0] <= 0.0:
            raise ValueError("wave vector must have positive frequency k^0 > 0")
        a_scale = max(1.0, float(np.max(np.abs(self.polarization.as_array()))))
        if abs(minkowski_dot(self.k, self.polarization)) > TRANSVERSE_TOLERANCE * scale * a_scale:
            raise ValueError("polarization is not transverse: k.a != 0")

    def phase(self, x):
        return np.einsum("...i,i->...", np.asarray(x, dtype=float), lower(self.k.as_array()))

    def value(self, x):
        f, _, _ = self.profile.derivatives(self.phase(x))
        return np.asarray(f)[..., None] * self.polarization.as_array()

    def jacobian(self, x):
        _, f1, _ = self.profile.derivatives(self.phase(x))
        outer = np.outer(lower(self.k.as_array()), self.polarization.as_array())
        return np.asarray(f1)[..., None, None] * outer

    def field_tensor(self, x):
        _, f1, _ = self.profile.derivatives(self.phase(x))
        k, a = self.k.as_array(), self.polarization.as_array()
        return np.asarray(f1)[..., None, None] * (np.outer(k, a) - np.outer(a, k))

    def field_divergence(self, x):
        _, _, f2 = self.profile.derivatives(self.phase(x))
        k, a = self.k.as_array(), self.polarization.as_array()
        direction = minkowski_dot(k, a) * k - minkowski_dot(k, k) * a
        return np.asarray(f2)[..., None] * direction

    def wave_operator(self, x):
        _, _, f2 = self.profile.derivatives(self.phase(x))
        k = self.k.as_array()
        return np.asarray(f2)[..., None] * (minkowski_dot(k, k) * self.polarization.as_array())

    def lorenz_divergence(self, x):
        _, f1, _ = self.profile.derivatives(self.phase(x))
        return np.asarray(f1) * minkowski_dot(self.k, self.polarization)

    def descriptor(self) -> dict:
        out = {"kind": "plane_wave", "k": self.k.as_array().tolist(),
               "polarization": self.polarization.as_array().tolist()}
        out.update(self.profile.descriptor())
        return out


# ---------------------------------------------------------------------------
# Gauge functions
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PolynomialGauge:
    """Lambda(x) = c + b.x + 1/2 x^T Q x in plain components (degree <= 2)"""
    constant: float = 0.0
    linear: Tuple[float, ...] = (0.0, 0.0, 0.0, 0.0)
    quadratic: Tuple[Tuple[float, ...], ...] = ((0.0,) * 4,) * 4

    def __post_init__(self):
        b = np.asarray(self.linear, dtype=float)
        q = np.asarray(self.quadratic, dtype=float)
        if b.shape != (4,) or q.shape != (4, 4):
            raise ValueError("gauge needs 4 linear and 4x4 quadratic coefficients")
        if not np.allclose(q, q.T, rtol=0.0, atol=1e-14):
            raise ValueError("quadratic gauge coefficients must be symmetric")
        object.__setattr__(self, "linear", tuple(b.tolist()))
        object.__setattr__(self, "quadratic", tuple(tuple(row) for row in q.tolist()))

    @property
    def b(self) -> np.ndarray:
        return np.asarray(self.linear)

    @property
    def Q(self) -> np.ndarray:
        return np.asarray(self.quadratic)

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return self.constant + x @ self.b + 0.5 * np.einsum("...i,ij,...j->...", x, self.Q, x)

    def gradient(self, x):
        """Covariant gradient d_mu Lambda"""
        return self.b + np.asarray(x, dtype=float) @ self.Q

    def hessian(self) -> np.ndarray:
        return self.Q

    def box(self) -> float:
        return float(np.sum(METRIC_SIGNS * np.diag(self.Q)))

    def __eq__(self, other) -> bool:
        return (isinstance(other, PolynomialGauge) and self.constant == other.constant
                and self.linear == other.linear and self.quadratic == other.quadratic)

    def __hash__(self) -> int:
        return hash((self.constant, self.linear, self.quadratic))

    def descriptor(self) -> dict:
        return {"constant": self.constant, "linear": list(self.linear),
                "quadratic": [list(row) for row in self.quadratic]}


GaugeFunction = PolynomialGauge


@dataclass(frozen=True)
class GaugedPotential(PotentialModel):
    """A'^alpha = A^alpha - d^alpha Lambda"""
    base: PotentialModel
    gauge: PolynomialGauge

    def value(self, x):
        return self.base.value(x) - METRIC_SIGNS * self.gauge.gradient(x)

    def jacobian(self, x):
        return self.base.jacobian(x) - self.gauge.hessian() * METRIC_SIGNS[None, :]

    def field_tensor(self, x):
        return self.base.field_tensor(x)

    def field_divergence(self, x):
        return self.base.field_divergence(x)

    def wave_operator(self, x):
        return self.base.wave_operator(x)

    def lorenz_divergence(self, x):
        return self.base.lorenz_divergence(x) - self.gauge.box()

    def descriptor(self) -> dict:
        return {"kind": "gauged", "base": self.base.descriptor(), "gauge": self.gauge.descriptor()}


# ---------------------------------------------------------------------------
# Wave functions
# ---------------------------------------------------------------------------

def _exponential_derivatives(phi, s1, s2, s3, order):
    """Derivatives of phi = exp(s) given the covariant derivatives of the exponent"""
    out = [phi]
    if order >= 1:
        out.append(s1 * phi[..., None])
    if order >= 2:
        out.append((s2 + s1[..., :, None] * s1[..., None, :]) * phi[..., None, None])
    if order >= 3:
        cross = (s2[..., :, :, None] * s1[..., None, None, :]
                 + s2[..., :, None, :] * s1[..., None, :, None]
                 + s2[..., None, :, :] * s1[..., :, None, None])
        cube = s1[..., :, None, None] * s1[..., None, :, None] * s1[..., None, None, :]
        out.append((s3 + cross + cube) * phi[..., None, None, None])
    return tuple(out)


def _check_on_shell(p: FourVector, consts: PhysicalConstants, what: str):
    mass_shell = (consts.m0 * consts.c) ** 2
    scale = max(1.0, float(np.max(np.abs(p.as_array()))) ** 2, mass_shell)
    defect = minkowski_dot(p, p) - mass_shell
    if abs(defect) > ON_SHELL_TOLERANCE * scale:
        raise OffShellMomentum(f"{what} is off-shell: p.p - m0^2c^2 = {defect:.3e}")


class WaveFunctionModel:
    """Closed-form solution phi(x) carrying the constants it solves KG for"""
    consts: PhysicalConstants

    def phi(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def derivatives(self, x: np.ndarray, order: int) -> tuple:
        """(phi, d_a phi, d_a d_b phi, d_a d_b d_c phi) up to `order`, covariant indices"""
        raise NotImplementedError

    def amplitude_bound(self) -> float:
        """Upper bound of |phi| over spacetime"""
        raise NotImplementedError

    def descriptor(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class PlaneWave(WaveFunctionModel):
    """phi = exp(-i p.x / hbar)"""
    p: FourVector
    consts: PhysicalConstants = NATURAL_UNITS
    allow_off_shell: bool = False

    def __post_init__(self):
        if not self.allow_off_shell:
            _check_on_shell(self.p, self.consts, "plane-wave momentum")

    @classmethod
    def on_shell(cls, momentum: Tuple[float, float, float],
                 consts: PhysicalConstants = NATURAL_UNITS) -> "PlaneWave":
        return cls(on_shell_momentum(momentum, consts), consts)

    def _exponent_gradient(self):
        return -1j * lower(self.p.as_array()) / self.consts.hbar

    def phi(self, x):
        return np.exp(-1j * minkowski_dot(x, self.p.as_array()) / self.consts.hbar)

    def derivatives(self, x, order):
        x = np.asarray(x, dtype=float)
        phi = self.phi(x)
        s1 = np.broadcast_to(self._exponent_gradient(), x.shape)
        zeros2 = np.zeros(x.shape[:-1] + (4, 4), dtype=complex)
        zeros3 = np.zeros(x.shape[:-1] + (4, 4, 4), dtype=complex)
        return _exponential_derivatives(phi, s1, zeros2, zeros3, order)

    def amplitude_bound(self) -> float:
        return 1.0

    def descriptor(self) -> dict:
        return {"kind": "plane_wave", "p": self.p.as_array().tolist(),
                "allow_off_shell": self.allow_off_shell}


@dataclass(frozen=True)
class ModeSum(WaveFunctionModel):
    """phi = sum_m w_m exp(-i p_m.x / hbar)"""
    modes: Tuple[Tuple[complex, FourVector], ...]
    consts: PhysicalConstants = NATURAL_UNITS
    allow_off_shell: bool = False

    def __post_init__(self):
        modes = tuple((complex(w), p) for w, p in self.modes)
        if not modes:
            raise ValueError("mode sum needs at least one mode")
        if all(w == 0 for w, _ in modes):
            raise ValueError("mode sum weights are all zero")
        object.__setattr__(self, "modes", modes)
        if not self.allow_off_shell:
            for index, (_, p) in enumerate(modes):
                _check_on_shell(p, self.consts, f"mode {index} momentum")

    @property
    def weights(self) -> np.ndarray:
        return np.array([w for w, _ in self.modes], dtype=complex)

    @property
    def momenta(self) -> np.ndarray:
        return np.array([p.as_array() for _, p in self.modes])

    def _terms(self, x):
        phases = np.einsum("...i,mi->...m", np.asarray(x, dtype=float), lower(self.momenta))
        return self.weights * np.exp(-1j * phases / self.consts.hbar)

    def phi(self, x):
        return np.sum(self._terms(x), axis=-1)

    def derivatives(self, x, order):
        terms = self._terms(x)
        s = -1j * lower(self.momenta) / self.consts.hbar
        out = [np.sum(terms, axis=-1)]
        if order >= 1:
            out.append(np.einsum("...m,ma->...a", terms, s))
        if order >= 2:
            out.append(np.einsum("...m,ma,mb->...ab", terms, s, s))
        if order >= 3:
            out.append(np.einsum("...m,ma,mb,mc->...abc", terms, s, s, s))
        return tuple(out)

    def amplitude_bound(self) -> float:
        return float(np.sum(np.abs(self.weights)))

    def descriptor(self) -> dict:
        return {"kind": "mode_sum", "allow_off_shell": self.allow_off_shell,
                "modes": [{"weight": [w.real, w.imag], "p": p.as_array().tolist()}
                          for w, p in self.modes]}


@dataclass(frozen=True)
class KGVolkov(WaveFunctionModel):
    """
    Volkov solution phi = exp(-i S / hbar), S = p.x + G(k.x), for a charge in the
    plane-wave potential `field`; G' = -e(p.a) f/(k.p) - e^2 (a.a) f^2/(2 k.p)
    """
    p: FourVector
    field: PlaneWavePotential
    consts: PhysicalConstants = NATURAL_UNITS

    def __post_init__(self):
        _check_on_shell(self.p, self.consts, "Volkov momentum")
        if self.k_dot_p <= 0.0:
            raise ValueError("Volkov state needs k.p > 0")

    @property
    def k_dot_p(self) -> float:
        return minkowski_dot(self.field.k, self.p)

    def _coefficients(self):
        e = self.consts.e
        a = self.field.polarization
        kp = self.k_dot_p
        return -e * minkowski_dot(self.p, a) / kp, -e * e * minkowski_dot(a, a) / (2.0 * kp)

    def phase_function(self, xi):
        """G(xi) and its first three derivatives"""
        c1, c2 = self._coefficients()
        f, f1, f2 = self.field.profile.derivatives(xi)
        F1, F2 = self.field.profile.integrals(xi)
        g0 = c1 * F1 + c2 * F2
        g1 = c1 * f + c2 * f * f
        g2 = c1 * f1 + 2.0 * c2 * f * f1
        g3 = c1 * f2 + 2.0 * c2 * (f1 * f1 + f * f2)
        return g0, g1, g2, g3

    def action(self, x):
        xi = self.field.phase(x)
        g0, _, _, _ = self.phase_function(xi)
        return minkowski_dot(np.asarray(x, dtype=float), self.p.as_array()) + g0

    def phi(self, x):
        return np.exp(-1j * self.action(x) / self.consts.hbar)

    def derivatives(self, x, order):
        x = np.asarray(x, dtype=float)
        xi = self.field.phase(x)
        g0, g1, g2, g3 = (np.asarray(g, dtype=float) for g in self.phase_function(xi))
        k = lower(self.field.k.as_array())
        scale = -1j / self.consts.hbar
        phi = np.exp(scale * (minkowski_dot(x, self.p.as_array()) + g0))
        s1 = scale * (lower(self.p.as_array()) + g1[..., None] * k)
        kk = np.outer(k, k)
        s2 = scale * g2[..., None, None] * kk
        s3 = scale * g3[..., None, None, None] * np.einsum("ab,c->abc", kk, k)
        return _exponential_derivatives(phi, s1, s2, s3, order)

    def amplitude_bound(self) -> float:
        return 1.0

    def descriptor(self) -> dict:
        return {"kind": "kg_volkov", "p": self.p.as_array().tolist(),
                "field": self.field.descriptor()}


def _product_derivatives(f: tuple, g: tuple, order: int) -> tuple:
    """Leibniz rule for (f g) given derivative tuples of both factors"""
    out = [f[0] * g[0]]
    if order >= 1:
        out.append(f[1] * g[0][..., None] + f[0][..., None] * g[1])
    if order >= 2:
        out.append(f[2] * g[0][..., None, None]
                   + f[1][..., :, None] * g[1][..., None, :]
                   + f[1][..., None, :] * g[1][..., :, None]
                   + f[0][..., None, None] * g[2])
    if order >= 3:
        f1, g1 = f[1], g[1]
        out.append(f[3] * g[0][..., None, None, None]
                   + f[2][..., :, :, None] * g1[..., None, None, :]
                   + f[2][..., :, None, :] * g1[..., None, :, None]
                   + f[2][..., None, :, :] * g1[..., :, None, None]
                   + f1[..., :, None, None] * g[2][..., None, :, :]
                   + f1[..., None, :, None] * g[2][..., :, None, :]
                   + f1[..., None, None, :] * g[2][..., :, :, None]
                   + f[0][..., None, None, None] * g[3])
    return tuple(out)


@dataclass(frozen=True)
class GaugeTransformed(WaveFunctionModel):
    """phi' = exp(-i e Lambda / hbar) phi"""
    base: WaveFunctionModel
    gauge: PolynomialGauge

    @property
    def consts(self) -> PhysicalConstants:
        return self.base.consts

    def _factor(self, x, order):
        scale = -1j * self.consts.e / self.consts.hbar
        x = np.asarray(x, dtype=float)
        u = np.exp(scale * self.gauge.value(x))
        s1 = scale * self.gauge.gradient(x)
        s2 = np.broadcast_to(scale * self.gauge.hessian(), x.shape[:-1] + (4, 4))
        s3 = np.zeros(x.shape[:-1] + (4, 4, 4), dtype=complex)
        return _exponential_derivatives(u, s1, s2, s3, order)

    def phi(self, x):
        scale = -1j * self.consts.e / self.consts.hbar
        return self.base.phi(x) * np.exp(scale * self.gauge.value(x))

    def derivatives(self, x, order):
        return _product_derivatives(self.base.derivatives(x, order), self._factor(x, order), order)

    def amplitude_bound(self) -> float:
        return self.base.amplitude_bound()

    def descriptor(self) -> dict:
        return {"kind": "gauge_transformed", "base": self.base.descriptor(),
                "gauge": self.gauge.descriptor()}


def on_shell_momentum(momentum: Tuple[float, float, float],
                      consts: PhysicalConstants = NATURAL_UNITS) -> FourVector:
    """Positive-energy four-momentum (E/c, p) with p.p = m0^2 c^2"""
    px, py, pz = (float(v) for v in momentum)
    energy = math.sqrt((consts.m0 * consts.c) ** 2 + px * px + py * py + pz * pz)
    return FourVector(energy, px, py, pz)


# ---------------------------------------------------------------------------
# Pairing and evaluation helpers
# ---------------------------------------------------------------------------

def check_pairing(model: WaveFunctionModel, A: PotentialModel,
                  consts: Optional[PhysicalConstants] = None):
    """Raises IncompatiblePair unless `model` solves KG in the potential `A`"""
    if consts is not None and consts != model.consts:
        raise IncompatiblePair("model was built with different physical constants")
    if isinstance(A, ConstantFieldPotential):
        raise IncompatiblePair(f"no catalog model solves KG in a constant field; {type(model).__name__} "
                               "cannot be paired with ConstantFieldPotential")
    if isinstance(model, GaugeTransformed):
        if not isinstance(A, GaugedPotential) or A.gauge != model.gauge:
            raise IncompatiblePair("gauge-transformed model needs the matching gauged potential")
        check_pairing(model.base, A.base)
    elif isinstance(model, KGVolkov):
        if not isinstance(A, PlaneWavePotential) or A != model.field:
            raise IncompatiblePair("KGVolkov requires its own PlaneWavePotential")
    elif isinstance(model, (PlaneWave, ModeSum)):
        if not isinstance(A, ZeroPotential):
            raise IncompatiblePair(f"{type(model).__name__} requires the Zero potential")
    else:
        raise IncompatiblePair(f"unknown wave function model {type(model).__name__}")


def _points(x) -> Tuple[np.ndarray, bool]:
    if isinstance(x, FourVector):
        return x.as_array(), True
    arr = np.asarray(x, dtype=float)
    if arr.shape[-1:] != (4,):
        raise ValueError(f"points must have a trailing axis of length 4, got {arr.shape}")
    return arr, False


def _as_vector(values: np.ndarray, single: bool):
    return ComplexFourVector.from_array(values) if single else values


def _fd_phi_derivatives(model: WaveFunctionModel, x: np.ndarray, order: int, h: float) -> tuple:
    """Second-order central differences of phi; order <= 2"""
    if order > 2:
        raise ValueError("finite-difference phi derivatives are limited to order 2")
    phi0 = model.phi(x)
    out = [phi0]
    if order >= 1:
        shifted_up = model.phi(x[..., None, :] + h * _EYE)
        shifted_down = model.phi(x[..., None, :] - h * _EYE)
        out.append((shifted_up - shifted_down) / (2.0 * h))
    if order >= 2:
        basis = h * _EYE
        pp = model.phi(x[..., None, None, :] + basis[:, None, :] + basis[None, :, :])
        pm = model.phi(x[..., None, None, :] + basis[:, None, :] - basis[None, :, :])
        mp = model.phi(x[..., None, None, :] - basis[:, None, :] + basis[None, :, :])
        mm = model.phi(x[..., None, None, :] - basis[:, None, :] - basis[None, :, :])
        mixed = (pp - pm - mp + mm) / (4.0 * h * h)
        diagonal = (shifted_up - 2.0 * phi0[..., None] + shifted_down) / (h * h)
        idx = np.arange(4)
        mixed[..., idx, idx] = diagonal
        out.append(mixed)
    return tuple(out)


def phi_derivatives(model, A, x, order: int, method: str = ANALYTIC, h: float = FD_STEP) -> tuple:
    check_pairing(model, A)
    x, _ = _points(x)
    if method == ANALYTIC:
        return model.derivatives(x, order)
    if method == FINITE_DIFFERENCE:
        return _fd_phi_derivatives(model, x, order, h)
    raise ValueError(f"unknown derivative method {method!r}")


def _node_mask(phi: np.ndarray, node_epsilon: float, on_node: str) -> np.ndarray:
    nodes = np.abs(phi) < node_epsilon
    if np.any(nodes):
        if on_node == "raise":
            raise NodeSingularity(int(np.count_nonzero(nodes)), node_epsilon)
        log.debug("%d node point(s) replaced by NaN", int(np.count_nonzero(nodes)))
    return nodes


def _log_derivatives(model, A, x, order, node_epsilon, method, h, on_node="raise"):
    """Covariant derivatives of ln phi up to `order` (1..3)"""
    derivs = phi_derivatives(model, A, x, order, method, h)
    phi = derivs[0]
    nodes = _node_mask(phi, node_epsilon, on_node)
    safe = np.where(nodes, 1.0, phi)
    q = [d / safe.reshape(safe.shape + (1,) * n) for n, d in enumerate(derivs) if n > 0]
    out = [q[0]]
    if order >= 2:
        out.append(q[1] - q[0][..., :, None] * q[0][..., None, :])
    if order >= 3:
        q1, q2 = q[0], q[1]
        out.append(q[2]
                   - q2[..., :, :, None] * q1[..., None, None, :]
                   - q2[..., :, None, :] * q1[..., None, :, None]
                   - q2[..., None, :, :] * q1[..., :, None, None]
                   + 2.0 * q1[..., :, None, None] * q1[..., None, :, None] * q1[..., None, None, :])
    if np.any(nodes):
        out = [np.where(nodes.reshape(nodes.shape + (1,) * (n + 1)), np.nan, d)
               for n, d in enumerate(out)]
    return out


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def evaluate_phi(model: WaveFunctionModel, A: PotentialModel, x):
    check_pairing(model, A)
    points, single = _points(x)
    value = model.phi(points)
    return complex(value) if single else value


def grad_ln_phi(model, A, x, node_epsilon: float = NODE_EPSILON,
                method: str = ANALYTIC, h: float = FD_STEP):
    """Contravariant d^alpha ln phi"""
    points, single = _points(x)
    (L1,) = _log_derivatives(model, A, points, 1, node_epsilon, method, h)
    return _as_vector(METRIC_SIGNS * L1, single)


def complex_velocity(model, A, x, consts: Optional[PhysicalConstants] = None,
                     node_epsilon: float = NODE_EPSILON, method: str = ANALYTIC,
                     h: float = FD_STEP, on_node: str = "raise"):
    """V^alpha = i lambda^2 d^alpha ln phi + (e/m0) A^alpha"""
    check_pairing(model, A, consts)
    consts = model.consts
    points, single = _points(x)
    (L1,) = _log_derivatives(model, A, points, 1, node_epsilon, method, h, on_node)
    velocity = 1j * consts.lambda2 * METRIC_SIGNS * L1 + (consts.e / consts.m0) * A.value(points)
    return _as_vector(velocity, single)


def drift_velocities(v):
    """(V+, V-) with V = (1-i)/2 V+ + (1+i)/2 V-"""
    if isinstance(v, ComplexFourVector):
        return v.re - v.im, v.re + v.im
    v = np.asarray(v, dtype=complex)
    return v.real - v.imag, v.real + v.imag


def gauge_transform(model: WaveFunctionModel, A: PotentialModel,
                    gauge: PolynomialGauge) -> Tuple[GaugeTransformed, GaugedPotential]:
    check_pairing(model, A)
    return GaugeTransformed(model, gauge), GaugedPotential(A, gauge)


def field_tensor(A: PotentialModel, x):
    points, single = _points(x)
    values = A.field_tensor(points)
    return FieldTensor(values) if single else values


def field_divergence(A: PotentialModel, x):
    points, single = _points(x)
    values = A.field_divergence(points)
    return FourVector.from_array(values) if single else values


def lorenz_divergence(A: PotentialModel, x):
    points, single = _points(x)
    values = A.lorenz_divergence(points)
    return float(values) if single else values


def kg_residual(model, A, x, consts: Optional[PhysicalConstants] = None,
                method: str = ANALYTIC, h: float = FD_STEP):
    """(i hbar d_nu + e A_nu)(i hbar d^nu + e A^nu) phi - m0^2 c^2 phi"""
    check_pairing(model, A, consts)
    consts = model.consts
    points, single = _points(x)
    phi, d1, d2 = phi_derivatives(model, A, points, 2, method, h)
    hbar, e = consts.hbar, consts.e
    potential = A.value(points)
    box = np.einsum("...aa,a->...", d2, METRIC_SIGNS)
    residual = (-hbar * hbar * box
                + 1j * hbar * e * A.lorenz_divergence(points) * phi
                + 2j * hbar * e * np.einsum("...a,...a->...", potential, d1)
                + e * e * minkowski_dot(potential, potential) * phi
                - (consts.m0 * consts.c) ** 2 * phi)
    return complex(residual) if single else residual


def kg_ratio(model, A, x, consts: Optional[PhysicalConstants] = None,
             node_epsilon: float = NODE_EPSILON, method: str = ANALYTIC, h: float = FD_STEP):
    """kg_residual / (m0^2 phi); constant zero on solutions"""
    check_pairing(model, A, consts)
    points, single = _points(x)
    phi = model.phi(points)
    _node_mask(phi, node_epsilon, "raise")
    ratio = kg_residual(model, A, points, method=method, h=h) / (model.consts.m0 ** 2 * phi)
    return complex(ratio) if single else ratio


def velocity_jacobian(model, A, x, consts: Optional[PhysicalConstants] = None,
                      node_epsilon: float = NODE_EPSILON, method: str = ANALYTIC,
                      h: float = FD_STEP, on_node: str = "raise") -> np.ndarray:
    """J[..., beta, alpha] = d_beta V^alpha"""
    check_pairing(model, A, consts)
    consts = model.consts
    points, _ = _points(x)
    if method == FINITE_DIFFERENCE:
        up = complex_velocity(model, A, points[..., None, :] + h * _EYE, node_epsilon=node_epsilon,
                              method=method, h=h, on_node=on_node)
        down = complex_velocity(model, A, points[..., None, :] - h * _EYE, node_epsilon=node_epsilon,
                                method=method, h=h, on_node=on_node)
        return (up - down) / (2.0 * h)
    _, L2 = _log_derivatives(model, A, points, 2, node_epsilon, method, h, on_node)
    return (1j * consts.lambda2 * L2 * METRIC_SIGNS[None, :]
            + (consts.e / consts.m0) * A.jacobian(points))


def velocity_wave(model, A, x, consts: Optional[PhysicalConstants] = None,
                  node_epsilon: float = NODE_EPSILON, method: str = ANALYTIC,
                  h: float = FD_STEP, on_node: str = "raise") -> np.ndarray:
    """d_nu d^nu V^alpha"""
    check_pairing(model, A, consts)
    consts = model.consts
    points, _ = _points(x)
    if method == FINITE_DIFFERENCE:
        kwargs = dict(node_epsilon=node_epsilon, method=method, h=h, on_node=on_node)
        centre = complex_velocity(model, A, points, **kwargs)
        up = complex_velocity(model, A, points[..., None, :] + h * _EYE, **kwargs)
        down = complex_velocity(model, A, points[..., None, :] - h * _EYE, **kwargs)
        second = (up - 2.0 * centre[..., None, :] + down) / (h * h)
        return np.einsum("...na,n->...a", second, METRIC_SIGNS)
    _, _, L3 = _log_derivatives(model, A, points, 3, node_epsilon, method, h, on_node)
    trace = np.einsum("...nna,n->...a", L3, METRIC_SIGNS)
    return (1j * consts.lambda2 * METRIC_SIGNS * trace
            + (consts.e / consts.m0) * A.wave_operator(points))


def material_derivative_V(model, A, x, consts: Optional[PhysicalConstants] = None,
                          node_epsilon: float = NODE_EPSILON, method: str = ANALYTIC,
                          h: float = FD_STEP, on_node: str = "raise"):
    """D_tau V^mu = V^nu d_nu V^mu + (i lambda^2 / 2) d^nu d_nu V^mu"""
    check_pairing(model, A, consts)
    consts = model.consts
    points, single = _points(x)
    kwargs = dict(node_epsilon=node_epsilon, method=method, h=h, on_node=on_node)
    velocity = complex_velocity(model, A, points, **kwargs)
    jacobian = velocity_jacobian(model, A, points, **kwargs)
    wave = velocity_wave(model, A, points, **kwargs)
    result = np.einsum("...n,...nm->...m", velocity, jacobian) + 0.5j * consts.lambda2 * wave
    return _as_vector(result, single)


def hat_force(model, A, x, consts: Optional[PhysicalConstants] = None,
              node_epsilon: float = NODE_EPSILON, method: str = ANALYTIC,
              h: float = FD_STEP, on_node: str = "raise"):
    """f^mu = -e V-hat_nu F^{mu nu} = -e (V_nu F^{mu nu} + (i lambda^2/2) d_nu F^{mu nu})"""
    check_pairing(model, A, consts)
    consts = model.consts
    points, single = _points(x)
    velocity = complex_velocity(model, A, points, node_epsilon=node_epsilon, method=method,
                                h=h, on_node=on_node)
    contraction = np.einsum("...mn,...n->...m", A.field_tensor(points), lower(velocity))
    force = -consts.e * (contraction + 0.5j * consts.lambda2 * A.field_divergence(points))
    return _as_vector(force, single)


def eom_residual(model, A, x, consts: Optional[PhysicalConstants] = None,
                 node_epsilon: float = NODE_EPSILON, method: str = ANALYTIC, h: float = FD_STEP):
    """m0 D_tau V^mu + e V-hat_nu F^{mu nu}; zero exactly when phi solves KG"""
    check_pairing(model, A, consts)
    points, single = _points(x)
    kwargs = dict(node_epsilon=node_epsilon, method=method, h=h)
    acceleration = material_derivative_V(model, A, points, **kwargs)
    residual = model.consts.m0 * acceleration - hat_force(model, A, points, **kwargs)
    return _as_vector(residual, single)


def curl_identity_residual(model, A, x, consts: Optional[PhysicalConstants] = None,
                           node_epsilon: float = NODE_EPSILON, method: str = ANALYTIC,
                           h: float = FD_STEP) -> np.ndarray:
    """d^a V^b - d^b V^a - (e/m0) F^{ab}"""
    check_pairing(model, A, consts)
    consts = model.consts
    points, _ = _points(x)
    jacobian = velocity_jacobian(model, A, points, node_epsilon=node_epsilon, method=method, h=h)
    raised = METRIC_SIGNS[:, None] * jacobian
    return raised - np.swapaxes(raised, -1, -2) - (consts.e / consts.m0) * A.field_tensor(points)


def density_profile(model: WaveFunctionModel, x) -> np.ndarray:
    """phi* phi at points x (unnormalized)"""
    points, _ = _points(x)
    return np.abs(model.phi(points)) ** 2


def describe_pair(model: WaveFunctionModel, A: PotentialModel) -> dict:
    return {"model": model.descriptor(), "potential": A.descriptor()}


__all__ = [
    "NODE_EPSILON", "FD_STEP", "ANALYTIC", "FINITE_DIFFERENCE",
    "CosineProfile", "LinearProfile",
    "PotentialModel", "ZeroPotential", "ConstantFieldPotential", "PlaneWavePotential",
    "GaugedPotential", "PolynomialGauge", "GaugeFunction",
    "WaveFunctionModel", "PlaneWave", "ModeSum", "KGVolkov", "GaugeTransformed",
    "on_shell_momentum", "check_pairing", "evaluate_phi", "phi_derivatives", "grad_ln_phi",
    "complex_velocity", "drift_velocities", "gauge_transform", "field_tensor",
    "field_divergence", "lorenz_divergence", "kg_residual", "kg_ratio", "velocity_jacobian",
    "velocity_wave", "material_derivative_V", "hat_force", "eom_residual",
    "curl_identity_residual", "density_profile", "describe_pair",
]
