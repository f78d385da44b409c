import numpy as np
import pytest

from fraclap.mesh import build_disc_mesh, build_interval_mesh, build_rectangle_mesh, Mesh


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def disc_level1():
    """Fan of 16 triangles refined twice: 256 elements, 97 free vertices."""
    return build_disc_mesh(16, 2)


@pytest.fixture(scope="session")
def disc_coarse():
    return build_disc_mesh(16, 1)


@pytest.fixture(scope="session")
def rect16():
    """2 x 4 cells of the square (-1, 1)^2, 16 triangles, 3 free vertices."""
    return build_rectangle_mesh(2, 4)


@pytest.fixture(scope="session")
def interval4():
    return build_interval_mesh(4)


def reference_triangle():
    return Mesh(2, [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], [[0, 1, 2]], [True, True, True])
