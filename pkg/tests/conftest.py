"""Shared session fixtures: domains, grids, and form bases.

Everything downstream (spectra, kernels, acceptance) reuses these, so
each geometry is discretized and solved once per pytest session.
"""

import numpy as np
import pytest

from windcover.forms import build_basis
from windcover.geometry import build_domain, discretize


def make_annulus(outer_bc: str = "neumann"):
    return build_domain((0.0, 0.0), 2.0, outer_bc,
                        [{"center": (0.0, 0.0), "radius": 1.0, "bc": "neumann"}])


@pytest.fixture(scope="session")
def annulus():
    return make_annulus()


@pytest.fixture(scope="session")
def annulus_grid(annulus):
    return discretize(annulus, 0.05)


@pytest.fixture(scope="session")
def annulus_basis(annulus_grid):
    return build_basis(annulus_grid)


@pytest.fixture(scope="session")
def annulus_grid_fine(annulus):
    return discretize(annulus, 0.02)


@pytest.fixture(scope="session")
def annulus_basis_fine(annulus_grid_fine):
    return build_basis(annulus_grid_fine)


@pytest.fixture(scope="session")
def annulus_dirichlet():
    return make_annulus("dirichlet")


@pytest.fixture(scope="session")
def annulus_dirichlet_grid(annulus_dirichlet):
    return discretize(annulus_dirichlet, 0.05)


@pytest.fixture(scope="session")
def annulus_dirichlet_basis(annulus_dirichlet_grid):
    return build_basis(annulus_dirichlet_grid)


@pytest.fixture(scope="session")
def twohole():
    return build_domain((0.0, 0.0), 5.0, "neumann",
                        [{"center": (-2.0, 0.0), "radius": 1.0, "bc": "neumann"},
                         {"center": (2.0, 0.0), "radius": 1.0, "bc": "neumann"}])


@pytest.fixture(scope="session")
def twohole_grid(twohole):
    return discretize(twohole, 0.05)


@pytest.fixture(scope="session")
def twohole_basis(twohole_grid):
    return build_basis(twohole_grid)


@pytest.fixture(scope="session")
def probe_point():
    return np.array([1.5, 0.0])
