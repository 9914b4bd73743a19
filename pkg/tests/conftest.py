"""
Shared fixtures: constants, catalog models and small seeded ensembles
"""

import math
import os
import sys

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from spacetime import NATURAL_UNITS, FourVector, PhysicalConstants  # noqa: E402
from stochastic import InitialDistribution, make_tau_grid, simulate_forward  # noqa: E402
from wavefunction import (KGVolkov, ModeSum, PlaneWave, PlaneWavePotential,  # noqa: E402
                          PolynomialGauge, ZeroPotential, on_shell_momentum)

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")

TWO_PI = 2.0 * math.pi
TORUS_BOX = InitialDistribution("box", low=(0.0, 0.0, 0.0, 0.0), high=(TWO_PI, 0.0, 0.0, math.pi))


def mode_sum_model(consts=NATURAL_UNITS):
    return ModeSum(((1.0, on_shell_momentum((0.0, 0.0, 1.0), consts)),
                    (0.5, on_shell_momentum((0.0, 0.0, -1.0), consts))), consts)


def off_shell_model(consts=NATURAL_UNITS):
    return ModeSum(((1.0, FourVector(math.sqrt(2.5), 0.0, 0.0, 1.5)),
                    (0.5, FourVector(math.sqrt(2.5), 0.0, 0.0, -0.5))), consts,
                   allow_off_shell=True)


def weak_noise_volkov():
    """Volkov state in the builtin laser at hbar = 0.0025 (lambda = 0.05)"""
    consts = PhysicalConstants(hbar=0.0025)
    laser = PlaneWavePotential(FourVector(1.0, 0.0, 0.0, 1.0), FourVector(0.0, 0.5, 0.0, 0.0))
    return KGVolkov(FourVector(1.0, 0.0, 0.0, 0.0), laser, consts), laser, consts


@pytest.fixture(scope="session")
def consts():
    return NATURAL_UNITS


@pytest.fixture(scope="session")
def zero():
    return ZeroPotential()


@pytest.fixture(scope="session")
def plane_wave():
    return PlaneWave.on_shell((0.0, 0.0, 1.0))


@pytest.fixture(scope="session")
def mode_sum():
    return mode_sum_model()


@pytest.fixture(scope="session")
def off_shell():
    return off_shell_model()


@pytest.fixture(scope="session")
def laser():
    return PlaneWavePotential(FourVector(1.0, 0.0, 0.0, 1.0), FourVector(0.0, 0.5, 0.0, 0.0))


@pytest.fixture(scope="session")
def volkov(laser):
    return KGVolkov(FourVector(1.0, 0.0, 0.0, 0.0), laser)


@pytest.fixture(scope="session")
def gauge():
    return PolynomialGauge(0.3, (0.2, -0.1, 0.05, 0.4),
                           ((0.1, 0.02, 0.0, 0.03),
                            (0.02, -0.05, 0.0, 0.0),
                            (0.0, 0.0, 0.04, 0.0),
                            (0.03, 0.0, 0.0, 0.07)))


@pytest.fixture(scope="session")
def points():
    return np.random.default_rng(1234).uniform(-2.0, 2.0, size=(25, 4))


@pytest.fixture(scope="session")
def plane_wave_ensemble(plane_wave, zero, consts):
    """500 free plane-wave paths on the (t, z) torus, tau in [0, 2]"""
    return simulate_forward(plane_wave, zero, consts, TORUS_BOX, 500, make_tau_grid(0.0, 2.0, 0.05),
                            master_seed=7)


@pytest.fixture(scope="session")
def mode_sum_ensemble(mode_sum, zero, consts):
    """Mode-sum paths started from the stationary law"""
    init = InitialDistribution("density", low=(0.0, 0.0, 0.0, 0.0),
                               high=(TWO_PI, 0.0, 0.0, math.pi))
    return simulate_forward(mode_sum, zero, consts, init, 600, make_tau_grid(0.0, 1.0, 0.05),
                            master_seed=11, substeps=5)
