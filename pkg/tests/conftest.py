import numpy as np
import pytest

from broxdiff import PeriodicGrid, enhance, sample_noise
from broxdiff.noise import scale_noise


@pytest.fixture(scope="session")
def grid_small():
    return PeriodicGrid(128, 24)


@pytest.fixture(scope="session")
def grid_mid():
    return PeriodicGrid(512, 96)


@pytest.fixture(scope="session")
def grid_full():
    return PeriodicGrid(1024, 341)


@pytest.fixture(scope="session")
def noise64():
    return sample_noise(5, 64)


@pytest.fixture(scope="session")
def Xi_mid(grid_mid, noise64):
    """Unit-amplitude enhancement at a mid-size level."""
    return enhance(noise64, 48, 1.45, grid_mid)


@pytest.fixture(scope="session")
def Xi_tame(grid_mid, noise64):
    """Amplitude-scaled enhancement whose contraction threshold is small."""
    return scale_noise(enhance(noise64, 32, 1.45, grid_mid), 0.4)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(2024)
