import numpy as np
import pytest

from magicct.geometry import desk_geometry


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def tiny_geom():
    """16x16 grid, 12 views: the finite-difference scale."""
    return desk_geometry(16, 12)


@pytest.fixture(scope="session")
def small_geom():
    return desk_geometry(32, 60)
