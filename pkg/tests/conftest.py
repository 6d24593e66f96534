"""Shared fixtures: exact OU training data and its trained basis artifacts."""
import numpy as np
import pytest

from semifore.dforecast import build_shift_operator
from semifore.geometry import build_basis
from semifore.models import sample_ou_exact

OU_ALPHA = 1.0
OU_SIGMA = np.sqrt(2.0)   # equilibrium N(0, 1)
OU_TAU = 0.1


@pytest.fixture(scope="session")
def ou_series():
    rng = np.random.default_rng(42)
    return sample_ou_exact(5000, OU_ALPHA, OU_SIGMA, 0.0, OU_TAU, rng)


@pytest.fixture(scope="session")
def ou_basis(ou_series):
    return build_basis(ou_series, n_modes=100)


@pytest.fixture(scope="session")
def ou_shift(ou_basis):
    return build_shift_operator(ou_basis)
