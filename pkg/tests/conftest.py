import numpy as np
import pytest

from ma_bellman import build_control_grid, coarse_mesh, refined_levels
from ma_bellman.geometry import DomainGeometry


@pytest.fixture(scope="session")
def geometry():
    return DomainGeometry()


@pytest.fixture(scope="session")
def levels():
    """Meshes of refinement levels 0..4 built from the 91-node coarse mesh."""
    return refined_levels(coarse_mesh(), 4)


@pytest.fixture(scope="session")
def mesh0(levels):
    return levels[0]


@pytest.fixture(scope="session")
def mesh1(levels):
    return levels[1]


@pytest.fixture(scope="session")
def grid():
    return build_control_grid(64, 33)


@pytest.fixture(scope="session")
def small_grid():
    return build_control_grid(8, 5)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_points_in(mesh, n, rng):
    """Uniform points of the computational domain via random triangles."""
    p = mesh.points[mesh.triangles]
    tri = rng.choice(mesh.num_triangles, n, p=mesh.areas / mesh.areas.sum())
    w = rng.dirichlet(np.ones(3), n)
    return np.einsum("nk,nkd->nd", w, p[tri])
