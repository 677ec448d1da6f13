import numpy as np
import pytest

from cavident import ElasticityParams, build_square_mesh


@pytest.fixture(scope="session")
def params():
    return ElasticityParams(mu=0.2, lam=1.0, delta=1e-2)


@pytest.fixture(scope="session")
def mesh8():
    return build_square_mesh(8)


@pytest.fixture(scope="session")
def mesh16():
    return build_square_mesh(16)


@pytest.fixture
def rng():
    return np.random.default_rng(20260819)
