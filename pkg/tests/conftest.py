import numpy as np
import pytest

from ddpred.channel import GridConfig, build_dataset


@pytest.fixture(scope="session")
def small_grid():
    return GridConfig(M=4, N=4, L=2, F=6)


@pytest.fixture(scope="session")
def small_dataset(small_grid):
    return build_dataset(small_grid, 24, base_seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
