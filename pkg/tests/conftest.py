import numpy as np
import pytest

from smallobj.rng import Rng


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def nprng():
    return np.random.default_rng(1234)
