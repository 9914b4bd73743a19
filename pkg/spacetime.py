"""
Minkowski vector algebra for the stochastic Klein-Gordon simulator
Real and complex four-vectors, metric contraction, antisymmetric field tensors
"""

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

# Metric g = diag(+1, -1, -1, -1), stored as its diagonal
METRIC_SIGNS = np.array([1.0, -1.0, -1.0, -1.0])
METRIC = np.diag(METRIC_SIGNS)

TIME = 0
SPACE = (1, 2, 3)
COMPONENT_NAMES = ("c0", "c1", "c2", "c3")


@dataclass(frozen=True)
class FourVector:
    """Contravariant real four-vector (c0 = ct, c1..c3 spatial)"""
    c0: float = 0.0
    c1: float = 0.0
    c2: float = 0.0
    c3: float = 0.0

    def __post_init__(self):
        for name in COMPONENT_NAMES:
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ValueError(f"FourVector component {name} is not finite: {value}")
            object.__setattr__(self, name, value)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "FourVector":
        arr = np.asarray(values, dtype=float)
        if arr.shape != (4,):
            raise ValueError(f"expected 4 components, got shape {arr.shape}")
        return cls(*arr.tolist())

    def as_array(self) -> np.ndarray:
        return np.array([self.c0, self.c1, self.c2, self.c3])

    def lower(self) -> "FourVector":
        """Index-lowered copy (covariant components)"""
        return FourVector.from_array(self.as_array() * METRIC_SIGNS)

    def __add__(self, other: "FourVector") -> "FourVector":
        return FourVector.from_array(self.as_array() + other.as_array())

    def __sub__(self, other: "FourVector") -> "FourVector":
        return FourVector.from_array(self.as_array() - other.as_array())

    def __mul__(self, scalar: float) -> "FourVector":
        return FourVector.from_array(self.as_array() * float(scalar))

    __rmul__ = __mul__

    def __neg__(self) -> "FourVector":
        return FourVector.from_array(-self.as_array())


@dataclass(frozen=True)
class ComplexFourVector:
    """Complex four-vector stored as real and imaginary parts"""
    re: FourVector = field(default_factory=FourVector)
    im: FourVector = field(default_factory=FourVector)

    @classmethod
    def from_array(cls, values: Sequence[complex]) -> "ComplexFourVector":
        arr = np.asarray(values, dtype=complex)
        return cls(FourVector.from_array(arr.real), FourVector.from_array(arr.imag))

    def as_array(self) -> np.ndarray:
        return self.re.as_array() + 1j * self.im.as_array()

    def conj(self) -> "ComplexFourVector":
        return ComplexFourVector(self.re, -self.im)


@dataclass(frozen=True, eq=False)
class FieldTensor:
    """Antisymmetric field-strength tensor F^{mu nu} (contravariant)"""
    matrix: np.ndarray

    def __post_init__(self):
        arr = np.array(self.matrix, dtype=float)
        if arr.shape != (4, 4):
            raise ValueError(f"field tensor must be 4x4, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("field tensor has non-finite entries")
        if not np.array_equal(arr, -arr.T):
            raise ValueError("field tensor is not antisymmetric")
        arr.setflags(write=False)
        object.__setattr__(self, "matrix", arr)

    @classmethod
    def zero(cls) -> "FieldTensor":
        return cls(np.zeros((4, 4)))

    @classmethod
    def from_fields(cls, electric: Sequence[float] = (0.0, 0.0, 0.0),
                    magnetic: Sequence[float] = (0.0, 0.0, 0.0)) -> "FieldTensor":
        """Builds F from E and cB: F^{i0} = E^i, F^{ij} = -eps_ijk B^k"""
        ex, ey, ez = (float(v) for v in electric)
        bx, by, bz = (float(v) for v in magnetic)
        return cls(np.array([
            [0.0, -ex, -ey, -ez],
            [ex, 0.0, -bz, by],
            [ey, bz, 0.0, -bx],
            [ez, -by, bx, 0.0],
        ]))

    @classmethod
    def from_gradient(cls, jacobian: np.ndarray) -> "FieldTensor":
        """F^{mu nu} = d^mu A^nu - d^nu A^mu from J[beta, alpha] = d_beta A^alpha"""
        return cls(field_tensor_from_jacobian(np.asarray(jacobian, dtype=float)))

    def __eq__(self, other) -> bool:
        return isinstance(other, FieldTensor) and np.array_equal(self.matrix, other.matrix)

    def __hash__(self) -> int:
        return hash(self.matrix.tobytes())


@dataclass(frozen=True)
class PhysicalConstants:
    """hbar, m0, e, c, mu0 and the noise scale lambda = sqrt(hbar/m0)"""
    hbar: float = 1.0
    m0: float = 1.0
    e: float = 1.0
    c: float = 1.0
    mu0: float = 1.0
    lam: Optional[float] = None

    def __post_init__(self):
        for name in ("hbar", "m0", "c", "mu0"):
            value = float(getattr(self, name))
            if not (math.isfinite(value) and value > 0.0):
                raise ValueError(f"{name} must be positive and finite, got {value}")
            object.__setattr__(self, name, value)
        charge = float(self.e)
        if not math.isfinite(charge):
            raise ValueError(f"e must be finite, got {charge}")
        object.__setattr__(self, "e", charge)

        expected = math.sqrt(self.hbar / self.m0)
        if self.lam is None:
            object.__setattr__(self, "lam", expected)
        elif not math.isclose(float(self.lam), expected, rel_tol=1e-12):
            raise ValueError(f"lambda must equal sqrt(hbar/m0) = {expected}, got {self.lam}")
        else:
            object.__setattr__(self, "lam", expected)

    @property
    def lambda2(self) -> float:
        return self.hbar / self.m0

    def descriptor(self) -> dict:
        return {"hbar": self.hbar, "m0": self.m0, "e": self.e, "c": self.c, "mu0": self.mu0}


NATURAL_UNITS = PhysicalConstants()

VectorLike = Union[FourVector, np.ndarray, Sequence[float]]
ComplexVectorLike = Union[ComplexFourVector, np.ndarray]


def as_components(v) -> np.ndarray:
    """Component array (..., 4) of a FourVector, ComplexFourVector or array"""
    if isinstance(v, (FourVector, ComplexFourVector)):
        return v.as_array()
    return np.asarray(v)


def lower(v: np.ndarray) -> np.ndarray:
    """Lowers the last index of a component array"""
    return np.asarray(v) * METRIC_SIGNS


def minkowski_dot(a: VectorLike, b: VectorLike):
    """a^0 b^0 - a^1 b^1 - a^2 b^2 - a^3 b^3, broadcast over leading axes"""
    result = np.einsum("...i,i,...i->...", as_components(a), METRIC_SIGNS, as_components(b))
    if isinstance(a, FourVector) and isinstance(b, FourVector):
        return float(result)
    return result


def minkowski_norm2(a: VectorLike):
    return minkowski_dot(a, a)


def complex_minkowski_dot(a: ComplexVectorLike, b: ComplexVectorLike):
    """Bilinear extension of the metric; conjugate the first argument yourself for V*.V"""
    av = np.asarray(as_components(a), dtype=complex)
    bv = np.asarray(as_components(b), dtype=complex)
    result = np.einsum("...i,i,...i->...", av, METRIC_SIGNS, bv)
    if isinstance(a, ComplexFourVector) and isinstance(b, ComplexFourVector):
        return complex(result)
    return result


def field_tensor_from_jacobian(jacobian: np.ndarray) -> np.ndarray:
    """F^{mu nu} arrays (..., 4, 4) from J[..., beta, alpha] = d_beta A^alpha"""
    raised = METRIC_SIGNS[:, None] * jacobian
    return raised - np.swapaxes(raised, -1, -2)


def lorentz_force(F, v: ComplexVectorLike, e: float):
    """-e v_nu F^{mu nu}; F may be a FieldTensor or an array (..., 4, 4)"""
    matrix = F.matrix if isinstance(F, FieldTensor) else np.asarray(F)
    components = np.asarray(as_components(v), dtype=complex)
    force = -e * np.einsum("...mn,...n->...m", matrix, lower(components))
    if isinstance(v, ComplexFourVector):
        return ComplexFourVector.from_array(force)
    return force
