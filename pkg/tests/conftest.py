import numpy as np
import pytest

from lisbayes.model import make_linear_problem


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def linear10():
    """Moderately informative linear problem, d = 10."""
    return make_linear_problem(10, 10, 1, lambda0=3.0).model


@pytest.fixture(scope="session")
def linear20():
    return make_linear_problem(20, 20, 2, lambda0=3.0).model
