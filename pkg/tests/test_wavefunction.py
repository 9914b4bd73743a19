import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from errors import IncompatiblePair, NodeSingularity, OffShellMomentum
from spacetime import (NATURAL_UNITS, ComplexFourVector, FieldTensor, FourVector, PhysicalConstants,
                       lorentz_force)
from wavefunction import (FINITE_DIFFERENCE, ConstantFieldPotential, KGVolkov, LinearProfile, ModeSum, PlaneWave,
                          PlaneWavePotential, ZeroPotential, check_pairing, complex_velocity,
                          curl_identity_residual, drift_velocities, eom_residual, evaluate_phi,
                          field_tensor, gauge_transform, grad_ln_phi, hat_force, kg_ratio,
                          kg_residual, lorenz_divergence, material_derivative_V, on_shell_momentum,
                          phi_derivatives)

points_strategy = arrays(np.float64, (3, 4),
                         elements=st.floats(min_value=-3.0, max_value=3.0, allow_nan=False))


def models(plane_wave, mode_sum, volkov, laser):
    zero = ZeroPotential()
    return [(plane_wave, zero), (mode_sum, zero), (volkov, laser)]


def test_plane_wave_velocity_is_p_over_m(plane_wave, zero):
    v = complex_velocity(plane_wave, zero, FourVector(0.3, 1.0, -2.0, 0.5))
    assert isinstance(v, ComplexFourVector)
    np.testing.assert_allclose(v.as_array(), [math.sqrt(2.0), 0.0, 0.0, 1.0], atol=1e-14)


def test_plane_wave_lorentz_invariant_is_c_squared(plane_wave, zero, points):
    v = complex_velocity(plane_wave, zero, points)
    invariant = np.einsum("...i,i,...i->...", np.conj(v), [1, -1, -1, -1], v)
    np.testing.assert_allclose(invariant, 1.0, atol=1e-12)


def test_on_shell_constructor_and_off_shell_rejection():
    p = on_shell_momentum((0.0, 0.0, 1.0))
    assert p.c0 == pytest.approx(math.sqrt(2.0))
    with pytest.raises(OffShellMomentum):
        PlaneWave(FourVector(2.0, 0.0, 0.0, 1.0))
    PlaneWave(FourVector(2.0, 0.0, 0.0, 1.0), allow_off_shell=True)


def test_off_shell_plane_wave_has_constant_kg_ratio(zero):
    model = PlaneWave(FourVector(2.0, 0.0, 0.0, 1.0), allow_off_shell=True)
    ratio = kg_ratio(model, zero, np.array([[0.1, 0.2, 0.3, 0.4], [1.0, -1.0, 2.0, 0.0]]))
    # (p.p - m0^2 c^2) / m0^2 = 3 - 1
    np.testing.assert_allclose(ratio, 2.0, atol=1e-12)


def test_pairing_rules(plane_wave, volkov, laser, zero):
    with pytest.raises(IncompatiblePair):
        check_pairing(plane_wave, laser)
    with pytest.raises(IncompatiblePair):
        check_pairing(volkov, zero)
    other = PlaneWavePotential(FourVector(1.0, 0.0, 0.0, 1.0), FourVector(0.0, 0.0, 0.3, 0.0))
    with pytest.raises(IncompatiblePair):
        check_pairing(volkov, other)
    with pytest.raises(IncompatiblePair):
        complex_velocity(plane_wave, zero, FourVector(), consts=PhysicalConstants(hbar=0.5))


def test_plane_wave_potential_validation():
    with pytest.raises(ValueError):
        PlaneWavePotential(FourVector(1.0, 0.0, 0.0, 0.5), FourVector(0.0, 1.0, 0.0, 0.0))
    with pytest.raises(ValueError):
        PlaneWavePotential(FourVector(1.0, 0.0, 0.0, 1.0), FourVector(1.0, 0.0, 0.0, 0.0))
    with pytest.raises(ValueError):
        PlaneWavePotential(FourVector(-1.0, 0.0, 0.0, 1.0), FourVector(0.0, 1.0, 0.0, 0.0))


def test_constant_field_potential_only_feeds_field_evaluations(plane_wave, mode_sum, volkov, points):
    F = FieldTensor.from_fields((0.0, 0.0, 0.4), (0.0, 0.0, 1.0))
    uniform = ConstantFieldPotential(F)
    np.testing.assert_allclose(field_tensor(uniform, points), np.broadcast_to(F.matrix, (25, 4, 4)))
    force = lorentz_force(uniform.field_tensor(points[0]), np.array([1.0, 0.0, 0.0, 0.0]), 1.0)
    np.testing.assert_allclose(force[1:], [0.0, 0.0, -0.4], atol=1e-15)
    for model in (plane_wave, mode_sum, volkov):
        with pytest.raises(IncompatiblePair, match="constant field"):
            check_pairing(model, uniform)


def test_plane_wave_potential_is_source_free_and_lorenz(laser, points):
    np.testing.assert_allclose(laser.field_divergence(points), 0.0, atol=1e-15)
    np.testing.assert_allclose(lorenz_divergence(laser, points), 0.0, atol=1e-15)
    F = field_tensor(laser, points)
    np.testing.assert_allclose(F, -np.swapaxes(F, -1, -2))


@given(points_strategy)
def test_kg_residual_vanishes_on_catalog_models(x):
    laser = PlaneWavePotential(FourVector(1.0, 0.0, 0.0, 1.0), FourVector(0.0, 0.5, 0.0, 0.0))
    catalog = [(PlaneWave.on_shell((0.3, 0.0, 1.0)), ZeroPotential()),
               (ModeSum(((1.0, on_shell_momentum((0, 0, 1))), (0.5j, on_shell_momentum((0, 1, 0))))),
                ZeroPotential()),
               (KGVolkov(FourVector(1.0, 0.0, 0.0, 0.0), laser), laser)]
    for model, A in catalog:
        scale = model.amplitude_bound()
        assert np.max(np.abs(kg_residual(model, A, x))) <= 1e-12 * max(1.0, scale)


def test_kg_residual_with_linear_profile():
    crossed = PlaneWavePotential(FourVector(1.0, 0.0, 0.0, 1.0), FourVector(0.0, 0.2, 0.0, 0.0),
                                 LinearProfile())
    model = KGVolkov(FourVector(1.0, 0.0, 0.0, 0.0), crossed)
    x = np.array([[0.1, 0.0, 0.0, -0.2], [0.5, 1.0, 0.0, 0.3]])
    assert np.max(np.abs(kg_residual(model, crossed, x))) < 1e-12


@pytest.mark.parametrize("which", [0, 1, 2])
def test_analytic_and_fd_derivatives_agree(which, plane_wave, mode_sum, volkov, laser, points):
    model, A = models(plane_wave, mode_sum, volkov, laser)[which]
    analytic = phi_derivatives(model, A, points[:5], 2)
    fd = phi_derivatives(model, A, points[:5], 2, method=FINITE_DIFFERENCE)
    for exact, approx in zip(analytic, fd):
        np.testing.assert_allclose(approx, exact, atol=1e-5)


@pytest.mark.parametrize("which", [0, 1, 2])
def test_fd_derivatives_converge_at_second_order(which, plane_wave, mode_sum, volkov, laser, points):
    model, A = models(plane_wave, mode_sum, volkov, laser)[which]
    analytic = phi_derivatives(model, A, points[:5], 2)
    coarse = phi_derivatives(model, A, points[:5], 2, method=FINITE_DIFFERENCE, h=0.02)
    fine = phi_derivatives(model, A, points[:5], 2, method=FINITE_DIFFERENCE, h=0.01)
    for order in (1, 2):
        ratio = (np.max(np.abs(coarse[order] - analytic[order]))
                 / np.max(np.abs(fine[order] - analytic[order])))
        assert 3.0 <= ratio <= 5.0, (order, ratio)


def test_volkov_without_amplitude_is_a_plane_wave(points):
    dark = PlaneWavePotential(FourVector(1.0, 0.0, 0.0, 1.0), FourVector(0.0, 0.0, 0.0, 0.0))
    volkov = KGVolkov(FourVector(1.0, 0.0, 0.0, 0.0), dark)
    rest = PlaneWave(FourVector(1.0, 0.0, 0.0, 0.0))
    for ours, theirs in zip(phi_derivatives(volkov, dark, points, 3),
                            phi_derivatives(rest, ZeroPotential(), points, 3)):
        np.testing.assert_allclose(ours, theirs, rtol=0.0, atol=1e-12)
    np.testing.assert_allclose(complex_velocity(volkov, dark, points),
                               complex_velocity(rest, ZeroPotential(), points), rtol=0.0, atol=1e-12)
    np.testing.assert_allclose(hat_force(volkov, dark, points), 0.0, atol=1e-12)


@pytest.mark.parametrize("which", [0, 1, 2])
def test_eom_and_curl_identity_hold_on_solutions(which, plane_wave, mode_sum, volkov, laser, points):
    model, A = models(plane_wave, mode_sum, volkov, laser)[which]
    assert np.max(np.abs(eom_residual(model, A, points))) < 1e-9
    assert np.max(np.abs(curl_identity_residual(model, A, points))) < 1e-10


def test_eom_residual_is_nonzero_off_shell(off_shell, zero, points):
    assert np.max(np.abs(eom_residual(off_shell, zero, points))) > 1e-3


def test_plane_wave_is_unaccelerated(plane_wave, zero, points):
    np.testing.assert_allclose(material_derivative_V(plane_wave, zero, points), 0.0, atol=1e-12)
    np.testing.assert_allclose(hat_force(plane_wave, zero, points), 0.0)


def test_volkov_force_is_the_lorentz_force(volkov, laser, points):
    velocity = complex_velocity(volkov, laser, points)
    expected = lorentz_force(field_tensor(laser, points), velocity.real, volkov.consts.e)
    np.testing.assert_allclose(hat_force(volkov, laser, points).real, expected.real, atol=1e-12)
    np.testing.assert_allclose(velocity.imag, 0.0, atol=1e-14)


@given(arrays(np.complex128, (4,), elements=st.complex_numbers(max_magnitude=10.0,
                                                                 allow_nan=False,
                                                                 allow_infinity=False)))
def test_drift_decomposition_round_trip(v):
    plus, minus = drift_velocities(v)
    rebuilt = (1 - 1j) / 2 * plus + (1 + 1j) / 2 * minus
    np.testing.assert_allclose(rebuilt, v, atol=1e-12)
    np.testing.assert_allclose((minus - plus) / 2, v.imag, atol=1e-12)


def test_gauge_transform_leaves_velocity_and_field_unchanged(mode_sum, zero, volkov, laser, gauge,
                                                              points):
    for model, A in ((mode_sum, zero), (volkov, laser)):
        other_model, other_A = gauge_transform(model, A, gauge)
        np.testing.assert_allclose(complex_velocity(other_model, other_A, points),
                                   complex_velocity(model, A, points), atol=1e-10)
        np.testing.assert_allclose(field_tensor(other_A, points), field_tensor(A, points))
        assert np.max(np.abs(kg_residual(other_model, other_A, points))) < 1e-10
        np.testing.assert_allclose(np.abs(evaluate_phi(other_model, other_A, points)),
                                   np.abs(evaluate_phi(model, A, points)))


def test_node_raises_or_marks_nan(zero):
    standing = ModeSum(((1.0, on_shell_momentum((0, 0, 1))), (1.0, on_shell_momentum((0, 0, -1)))))
    node = np.array([0.0, 0.0, 0.0, math.pi / 2])
    with pytest.raises(NodeSingularity):
        complex_velocity(standing, zero, node)
    with pytest.raises(NodeSingularity):
        grad_ln_phi(standing, zero, node)
    marked = complex_velocity(standing, zero, np.stack([node, np.zeros(4)]), on_node="nan")
    assert np.all(np.isnan(marked[0]))
    assert np.all(np.isfinite(marked[1]))


def test_single_point_results_are_value_types(mode_sum, zero):
    x = FourVector(0.1, 0.2, 0.3, 0.4)
    assert isinstance(evaluate_phi(mode_sum, zero, x), complex)
    assert isinstance(kg_residual(mode_sum, zero, x), complex)
    assert isinstance(eom_residual(mode_sum, zero, x), ComplexFourVector)
    assert NATURAL_UNITS == mode_sum.consts
