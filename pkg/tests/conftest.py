import numpy as np
import pytest

from hosweep import level_symmetric


@pytest.fixture(scope="session")
def s4():
    return level_symmetric(4)


@pytest.fixture(scope="session")
def s2():
    return level_symmetric(2)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
