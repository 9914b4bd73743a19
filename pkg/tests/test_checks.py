import json
import math

import numpy as np
import pytest

from checks import (BOOTSTRAP_SE, FD_ERROR, MACHINE, CheckReport, ConstantField, CoordinateField,
                    TrigonometricField, action_stationarity_check, bootstrap_se,
                    charge_conservation_check, compute_j_kg, compute_j_stochastic,
                    curl_identity_check, current_equivalence_check, density_residual_check,
                    ehrenfest_check, energy_constancy_check, eom_kg_relation_check,
                    eom_residual_check, family_n_se, gauge_invariance_check, ito_trace,
                    kg_residual_check, lorentz_invariant_estimate, mean_derivative,
                    mean_velocity_check, partial_integration_check, plain,
                    quadratic_variation_check, random_points, resample_counts, wiener_law_check)
from density import Axis
from errors import InsufficientSlices
from stochastic import InitialDistribution, make_tau_grid, simulate_forward

from conftest import TWO_PI, weak_noise_volkov

TORUS = (Axis(0, 0.0, TWO_PI, 8, periodic=True), Axis(3, 0.0, math.pi, 8, periodic=True))


def mode_sum_axes(n_z):
    return (Axis(0, 0.0, TWO_PI, 4, periodic=True), Axis(3, 0.0, math.pi, n_z, periodic=True))


def z_perturbation(harmonic=1, amplitude=0.1):
    """eta^z = amplitude sin(2 harmonic z), periodic on [0, pi)"""
    return TrigonometricField([[0, 0, 0, -1j * amplitude]], [[0, 0, 0, 2.0 * harmonic]])


@pytest.fixture(scope="module")
def off_shell_ensemble(off_shell, zero, consts):
    init = InitialDistribution("density", high=(TWO_PI, 0.0, 0.0, math.pi))
    return simulate_forward(off_shell, zero, consts, init, 1000, make_tau_grid(0.0, 1.0, 0.05),
                            master_seed=17)


def test_report_outcome_and_labelling():
    report = CheckReport("kg_residual", 1e-12, 0.0, 1e-9, MACHINE, True)
    assert report.outcome_ok
    control = report.labelled(name="kg_offshell", expected_fail=True, scenario="demo")
    assert not control.outcome_ok
    record = control.to_dict()
    assert record["name"] == "kg_offshell" and record["provenance"] == {"scenario": "demo"}
    assert record["outcome_ok"] is False
    json.dumps(record)


def test_report_validation():
    with pytest.raises(ValueError):
        CheckReport("x", 0.0, 0.0, 1.0, "eyeball", True)
    with pytest.raises(ValueError):
        CheckReport("x", 0.0, 0.0, 1.0, BOOTSTRAP_SE, True)
    CheckReport("x", 5.0, 0.0, 1.0, BOOTSTRAP_SE, False)


def test_plain_makes_json_friendly_values():
    out = plain({"a": np.float64(math.nan), "b": 1 + 2j, "c": np.arange(2), 3: (np.bool_(True),)})
    assert out == {"a": None, "b": [1.0, 2.0], "c": [0, 1], "3": [True]}


def test_trigonometric_field_derivatives_match_differences():
    field_ = TrigonometricField.random(np.random.default_rng(3), [TWO_PI, 1.0, 1.0, math.pi])
    x = np.random.default_rng(4).uniform(-1.0, 1.0, size=(6, 4))
    h = 1e-6
    for b in range(4):
        shift = h * np.eye(4)[b]
        fd = (field_.value(x + shift) - field_.value(x - shift)) / (2.0 * h)
        np.testing.assert_allclose(field_.jacobian(x)[:, b, :], fd, atol=1e-6)
    h = 1e-4
    box = np.zeros((6, 4), dtype=complex)
    for b, sign in enumerate((1.0, -1.0, -1.0, -1.0)):
        shift = h * np.eye(4)[b]
        box += sign * (field_.value(x + shift) - 2.0 * field_.value(x) + field_.value(x - shift)) / h ** 2
    np.testing.assert_allclose(field_.wave(x), box, atol=1e-4)
    with pytest.raises(ValueError):
        TrigonometricField(np.ones((2, 4)), np.ones((3, 4)))


def test_mean_derivative_of_simple_fields():
    V = np.array([[1.0 + 0.5j, 0.2, 0.0, -0.3j]])
    x = np.zeros((1, 4))
    np.testing.assert_allclose(mean_derivative(V, ConstantField((1, 2, 3, 4)), x, 1.0), 0.0)
    np.testing.assert_allclose(mean_derivative(V, CoordinateField(), x, 1.0), V)
    np.testing.assert_allclose(mean_derivative(V, CoordinateField(), x, 1.0, star=True), np.conj(V))


def test_bootstrap_resamples_are_reproducible():
    counts = list(resample_counts(50, master_seed=3, n_resamples=4))
    assert all(c.sum() == 50 for c in counts)
    again = list(resample_counts(50, master_seed=3, n_resamples=4))
    np.testing.assert_array_equal(counts[2], again[2])
    values = np.random.default_rng(8).standard_normal((400, 2))
    se = bootstrap_se(values, master_seed=3)
    np.testing.assert_allclose(se, 1.0 / math.sqrt(400), rtol=0.25)
    assert np.isinf(bootstrap_se(np.ones((1, 3)), master_seed=3)).all()


def test_plane_wave_lorentz_invariant_is_exact(plane_wave_ensemble):
    report = lorentz_invariant_estimate(plane_wave_ensemble)
    assert report.basis == MACHINE and report.passed
    assert report.statistic == pytest.approx(1.0, abs=1e-12)


def test_mode_sum_lorentz_invariant_holds_on_average(mode_sum_ensemble):
    report = lorentz_invariant_estimate(mode_sum_ensemble, n_se=5.0)
    assert report.basis == BOOTSTRAP_SE and report.se > 0.0
    assert report.passed


def test_off_shell_lorentz_invariant_misses_c_squared(off_shell_ensemble):
    # 0.65 on the initial law; the profile then slides along z and the gap widens
    report = lorentz_invariant_estimate(off_shell_ensemble)
    assert not report.passed
    assert report.statistic < 0.8


def test_energy_constancy_on_a_plane_wave(plane_wave_ensemble):
    report = energy_constancy_check(plane_wave_ensemble)
    assert report.basis == MACHINE and report.passed
    assert report.details["analytic_rate"] == 0.0


def test_energy_constancy_compares_the_slope_with_zero(mode_sum_ensemble):
    report = energy_constancy_check(mode_sum_ensemble)
    assert report.basis == BOOTSTRAP_SE and report.target == 0.0
    assert report.details["analytic_rate"] == 0.0
    assert report.passed and abs(report.statistic) <= report.tolerance


def test_mean_velocity_matches_the_drift(plane_wave_ensemble):
    assert mean_velocity_check(plane_wave_ensemble).passed


def test_mean_velocity_detects_a_scaled_drift(plane_wave, zero, consts):
    ensemble = simulate_forward(plane_wave, zero, consts, InitialDistribution("point"), 200,
                                make_tau_grid(0.0, 1.0, 0.05), master_seed=13, drift_scale=2.0)
    report = mean_velocity_check(ensemble)
    assert not report.passed
    np.testing.assert_allclose(report.details["velocity_gap"], [math.sqrt(2.0), 0.0, 0.0, 1.0],
                               atol=0.3)


def test_partial_integration_with_constant_fields(plane_wave_ensemble):
    alpha, beta = ConstantField((1.0 + 0.5j, 0.3, -0.2j, 0.7)), ConstantField((0.4, -1.0, 0.25, 0.5j))
    report = partial_integration_check(plane_wave_ensemble, alpha, beta)
    assert report.passed and report.statistic == 0.0


def test_partial_integration_coordinate_gap_is_the_ito_trace(plane_wave_ensemble):
    field_ = CoordinateField()
    gap = ito_trace(plane_wave_ensemble)
    assert gap == pytest.approx(-2.0)
    assert partial_integration_check(plane_wave_ensemble, field_, field_, expected_gap=gap).passed
    assert not partial_integration_check(plane_wave_ensemble, field_, field_).passed


def test_wiener_law_and_quadratic_variation(plane_wave_ensemble):
    wiener = wiener_law_check(plane_wave_ensemble)
    assert wiener.passed and wiener.details["count"] == 500 * 40
    qv = quadratic_variation_check(plane_wave_ensemble)
    assert qv.passed and qv.basis == FD_ERROR


def test_ehrenfest_on_a_free_plane_wave(plane_wave_ensemble):
    report = ehrenfest_check(plane_wave_ensemble, stride=4)
    assert report.passed
    np.testing.assert_allclose(report.details["rhs"], 0.0)


@pytest.fixture(scope="module")
def laser_ensemble():
    model, laser, consts = weak_noise_volkov()
    return simulate_forward(model, laser, consts, InitialDistribution("point"), 400,
                            make_tau_grid(0.0, 2.0, 0.01), master_seed=23)


def test_ehrenfest_tracks_the_lorentz_force_slice_by_slice(laser_ensemble):
    report = ehrenfest_check(laser_ensemble, stride=20)
    assert report.passed, report.details["worst"]
    details = report.details
    assert details["diff_per_slice"].shape == (161, 4)
    assert details["slices"][0] == pytest.approx(0.2) and details["slices"][-1] == pytest.approx(1.8)
    assert details["n_se_family"] > 4.0
    # the x kick peaks near tau = pi / 2 where k.x = tau
    assert np.max(np.abs(details["lhs_per_slice"][:, 1])) > 0.3


def test_ehrenfest_without_the_force_fails(laser_ensemble):
    report = ehrenfest_check(laser_ensemble, stride=20, force_scale=0.0)
    assert not report.passed
    assert report.details["worst"]["component"] == 1
    assert report.statistic > 2.0 * report.tolerance
    np.testing.assert_allclose(report.details["rhs_per_slice"], 0.0)


def test_ehrenfest_needs_five_interior_slices(plane_wave_ensemble):
    with pytest.raises(InsufficientSlices):
        ehrenfest_check(plane_wave_ensemble, stride=19)
    assert ehrenfest_check(plane_wave_ensemble, stride=18).details["diff_per_slice"].shape == (5, 4)


def test_family_multiplier_grows_with_the_comparisons():
    assert family_n_se(3.0, 1) == 3.0
    assert family_n_se(3.0, 724) == pytest.approx(4.62, abs=0.02)
    assert family_n_se(3.0, 10) < family_n_se(3.0, 100)


def test_action_is_stationary_on_shell(plane_wave, zero):
    report = action_stationarity_check(plane_wave, zero, z_perturbation(), TORUS)
    assert report.passed
    assert report.details["coefficients"][2] != 0.0


def test_action_is_not_stationary_off_shell(off_shell, zero):
    report = action_stationarity_check(off_shell, zero, z_perturbation(), mode_sum_axes(64))
    assert not report.passed
    with pytest.raises(ValueError):
        action_stationarity_check(off_shell, zero, z_perturbation(), mode_sum_axes(64),
                                  epsilons=[0.0, 0.01])


def test_random_points_are_seeded():
    a = random_points(5, (-2.0,) * 4, (2.0,) * 4)
    np.testing.assert_array_equal(a, random_points(5, (-2.0,) * 4, (2.0,) * 4))
    assert a.shape == (20, 4) and np.all(np.abs(a) <= 2.0)


def test_pointwise_checks_on_solutions(mode_sum, zero, volkov, laser, gauge):
    points = random_points(5, (-2.0,) * 4, (2.0,) * 4)
    for model, A in ((mode_sum, zero), (volkov, laser)):
        assert kg_residual_check(model, A, points).passed
        assert eom_residual_check(model, A, points).passed
        assert curl_identity_check(model, A, points).passed
        assert gauge_invariance_check(model, A, gauge, points).passed


def test_pointwise_checks_off_shell(off_shell, zero):
    points = random_points(6, (-2.0,) * 4, (2.0,) * 4)
    assert not kg_residual_check(off_shell, zero, points).passed
    assert not eom_residual_check(off_shell, zero, points).passed
    relation = eom_kg_relation_check(off_shell, zero, points)
    assert relation.passed and relation.details["max_eom"] > 1e-3


def test_analytic_density_checks(mode_sum, zero):
    axes = mode_sum_axes(1256)
    for kind in ("fokker_planck", "continuity", "osmotic"):
        report = density_residual_check(kind, mode_sum, zero, axes)
        assert report.passed and report.basis == FD_ERROR, kind
    doubled = density_residual_check("fokker_planck", mode_sum, zero, axes, drift_scale=2.0)
    assert not doubled.passed
    assert not density_residual_check("osmotic", mode_sum, zero, axes, lam_scale=2.0).passed
    with pytest.raises(ValueError):
        density_residual_check("diffusion", mode_sum, zero, axes)


def test_histogram_osmotic_check_on_a_plane_wave(plane_wave_ensemble, plane_wave, zero):
    report = density_residual_check("osmotic", plane_wave, zero, TORUS,
                                    ensemble=plane_wave_ensemble, n_resamples=50)
    assert report.basis == BOOTSTRAP_SE and report.se > 0.0
    assert report.passed
    assert report.provenance["tau_indices"] == [20]


def test_pooled_osmotic_histogram_uses_every_slice(plane_wave_ensemble, plane_wave, zero):
    single = density_residual_check("osmotic", plane_wave, zero, TORUS,
                                    ensemble=plane_wave_ensemble, n_resamples=50)
    pooled = density_residual_check("osmotic", plane_wave, zero, TORUS,
                                    ensemble=plane_wave_ensemble, n_resamples=50, pooled=True)
    assert pooled.passed and pooled.details["pooled"]
    assert pooled.details["samples"] == 500 * 41 and single.details["samples"] == 500
    assert pooled.provenance["tau_indices"] == list(range(41))
    assert pooled.se < single.se
    with pytest.raises(ValueError):
        density_residual_check("fokker_planck", plane_wave, zero, TORUS,
                               ensemble=plane_wave_ensemble, pooled=True)


def test_kg_current_of_a_plane_wave(plane_wave, zero):
    j = compute_j_kg(plane_wave, zero, TORUS)
    assert j.values.shape == (8, 8, 4)
    np.testing.assert_allclose(j.values, np.broadcast_to([-math.sqrt(2.0), 0.0, 0.0, -1.0], (8, 8, 4)),
                               atol=1e-12)
    with pytest.raises(ValueError):
        j.resampled(np.ones(3))


def test_stochastic_current_is_proportional_to_the_kg_current(plane_wave_ensemble, plane_wave, zero):
    js = compute_j_stochastic(plane_wave_ensemble, TORUS)
    jkg = compute_j_kg(plane_wave, zero, TORUS)
    report = current_equivalence_check(js, jkg, tolerance=0.2, master_seed=7, n_resamples=50)
    # every sample lands on the torus, so js ~ jkg / window volume
    assert report.details["constant"] == pytest.approx(1.0 / (TWO_PI * math.pi), rel=0.1)
    assert report.statistic < 0.2 and report.basis == BOOTSTRAP_SE


@pytest.mark.slow
def test_doubled_drift_breaks_current_equivalence(mode_sum, zero, consts):
    axes = (Axis(3, 0.0, math.pi, 16, periodic=True),)
    init = InitialDistribution("density", high=(TWO_PI, 0.0, 0.0, math.pi))
    jkg = compute_j_kg(mode_sum, zero, axes)
    reports = []
    for drift_scale in (1.0, 2.0):
        ensemble = simulate_forward(mode_sum, zero, consts, init, 2000,
                                    make_tau_grid(0.0, 4.0, 0.05), master_seed=29, substeps=5,
                                    drift_scale=drift_scale)
        reports.append(current_equivalence_check(compute_j_stochastic(ensemble, axes), jkg,
                                                 tolerance=0.1, master_seed=29, n_resamples=50))
    honest, doubled = reports
    assert honest.passed
    # the doubled drift sharpens the law towards p^2, so js no longer follows jkg
    assert not doubled.passed
    assert doubled.statistic > 2.0 * honest.statistic


def test_charge_conservation_of_analytic_currents(plane_wave, zero, volkov, laser):
    assert charge_conservation_check(compute_j_kg(plane_wave, zero, TORUS)).passed
    axes = (Axis(0, 0.0, TWO_PI, 64, periodic=True), Axis(3, 0.0, TWO_PI, 64, periodic=True))
    report = charge_conservation_check(compute_j_kg(volkov, laser, axes))
    assert report.passed and report.basis == FD_ERROR
