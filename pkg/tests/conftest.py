import numpy as np
import pytest

SEEDS = list(range(10))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
