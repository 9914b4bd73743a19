import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from spacetime import (METRIC_SIGNS, ComplexFourVector, FieldTensor, FourVector, PhysicalConstants,
                       complex_minkowski_dot, lorentz_force, lower, minkowski_dot, minkowski_norm2)
from wavefunction import ConstantFieldPotential

finite = st.floats(min_value=-1e3, max_value=1e3, allow_nan=False, allow_infinity=False)
vectors = arrays(np.float64, 4, elements=finite)
scalars = st.floats(min_value=-10.0, max_value=10.0, allow_nan=False)


def test_minkowski_dot_uses_mostly_minus_metric():
    a = FourVector(2.0, 1.0, 0.0, 1.0)
    assert minkowski_dot(a, a) == 2.0
    assert isinstance(minkowski_dot(a, a), float)
    assert minkowski_norm2(FourVector(1.0, 1.0, 0.0, 0.0)) == 0.0


@given(vectors, vectors)
def test_minkowski_dot_is_symmetric(a, b):
    assert minkowski_dot(a, b) == pytest.approx(minkowski_dot(b, a))


@given(vectors, vectors, vectors, scalars)
def test_minkowski_dot_is_bilinear(a, b, c, s):
    left = minkowski_dot(a * s + b, c)
    right = s * minkowski_dot(a, c) + minkowski_dot(b, c)
    assert left == pytest.approx(right, rel=1e-9, abs=1e-6)


@given(vectors)
def test_lower_is_an_involution(v):
    np.testing.assert_array_equal(lower(lower(v)), v)


@given(vectors, vectors)
def test_conjugation_is_an_involution(re, im):
    z = ComplexFourVector.from_array(re + 1j * im)
    assert z.conj().conj() == z
    np.testing.assert_array_equal(z.conj().as_array(), np.conj(z.as_array()))


def test_complex_dot_does_not_conjugate():
    z = ComplexFourVector.from_array([1j, 0, 0, 0])
    assert complex_minkowski_dot(z, z) == -1.0
    assert complex_minkowski_dot(z.conj(), z) == 1.0


@pytest.mark.parametrize("value", [math.nan, math.inf, -math.inf])
def test_four_vector_rejects_non_finite(value):
    with pytest.raises(ValueError):
        FourVector(0.0, value, 0.0, 0.0)


def test_four_vector_arithmetic():
    a, b = FourVector(1, 2, 3, 4), FourVector(0.5, 0.5, 0.5, 0.5)
    assert a + b == FourVector(1.5, 2.5, 3.5, 4.5)
    assert a - b == FourVector(0.5, 1.5, 2.5, 3.5)
    assert 2 * b == FourVector(1, 1, 1, 1)
    assert -a == FourVector(-1, -2, -3, -4)
    assert a.lower() == FourVector(1, -2, -3, -4)
    with pytest.raises(ValueError):
        FourVector.from_array([1.0, 2.0])


def test_field_tensor_must_be_antisymmetric():
    matrix = np.zeros((4, 4))
    matrix[0, 1] = 1.0
    with pytest.raises(ValueError):
        FieldTensor(matrix)
    matrix[1, 0] = -1.0
    assert FieldTensor(matrix) == FieldTensor(matrix.copy())


@given(arrays(np.float64, 3, elements=scalars), arrays(np.float64, 3, elements=scalars))
def test_from_fields_is_antisymmetric(electric, magnetic):
    F = FieldTensor.from_fields(electric, magnetic)
    np.testing.assert_array_equal(F.matrix, -F.matrix.T)
    np.testing.assert_array_equal(F.matrix[1:, 0], electric)


def test_from_gradient_recovers_a_uniform_field():
    F = FieldTensor.from_fields((0.3, -1.0, 0.2), (0.5, 0.0, 2.0))
    potential = ConstantFieldPotential(F)
    x = np.array([0.4, -1.0, 2.0, 0.5])
    np.testing.assert_allclose(FieldTensor.from_gradient(potential.jacobian(x)).matrix, F.matrix,
                               atol=1e-15)


@given(vectors, arrays(np.float64, 3, elements=scalars), arrays(np.float64, 3, elements=scalars))
def test_lorentz_force_is_orthogonal_to_velocity(v, electric, magnetic):
    F = FieldTensor.from_fields(electric, magnetic)
    force = lorentz_force(F, v, e=1.0)
    scale = max(1.0, float(np.max(np.abs(v)))) ** 2 * max(1.0, float(np.max(np.abs(F.matrix))))
    assert abs(minkowski_dot(v, force.real)) <= 1e-9 * scale


def test_lorentz_force_keeps_value_types():
    F = FieldTensor.from_fields((1.0, 0.0, 0.0))
    v = ComplexFourVector.from_array([1.0, 0.0, 0.0, 0.0])
    force = lorentz_force(F, v, e=1.0)
    assert isinstance(force, ComplexFourVector)
    # electric field along x accelerates a charge -e at rest towards -x
    np.testing.assert_allclose(force.as_array(), [0.0, -1.0, 0.0, 0.0])


def test_constants_define_lambda():
    consts = PhysicalConstants(hbar=0.01, m0=4.0)
    assert consts.lam == pytest.approx(0.05)
    assert consts.lambda2 == pytest.approx(0.0025)
    with pytest.raises(ValueError):
        PhysicalConstants(hbar=1.0, m0=1.0, lam=0.5)
    with pytest.raises(ValueError):
        PhysicalConstants(hbar=0.0)
    assert METRIC_SIGNS.tolist() == [1.0, -1.0, -1.0, -1.0]
