import numpy as np
import pytest

from flotempc.data_utils import load_default_params
from flotempc.flotation_model import DisturbanceInput, steady_state_solve


@pytest.fixture(scope='session')
def bundle():
    return load_default_params()


@pytest.fixture(scope='session')
def params(bundle):
    return bundle['params']


@pytest.fixture(scope='session')
def scales(bundle):
    return bundle['scales']


@pytest.fixture(scope='session')
def nominal(bundle):
    return bundle['nominal']


@pytest.fixture(scope='session')
def nominal_u(nominal):
    return np.array([nominal['jg_setpoint'], nominal['pulp_height_setpoint']])


@pytest.fixture(scope='session')
def nominal_d(nominal):
    return DisturbanceInput.from_lpm(nominal['feed_lpm'])


@pytest.fixture(scope='session')
def steady_state(params, nominal_u, nominal_d):
    """(x, z) of the controller model at the nominal operating point."""
    return steady_state_solve(nominal_u, nominal_d, params)
