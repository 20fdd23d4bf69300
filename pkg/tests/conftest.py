import numpy as np
import pytest

from shallowflow import fem
from shallowflow.geometry import box_mesh


def perturbed_hex(seed: int, amplitude: float = 0.15):
    """Single hexahedron: unit cube with randomly displaced vertices."""
    rng = np.random.default_rng(seed)
    _, mesh = box_mesh(1, 1, 1, 1.0, 1.0, 1.0)
    mesh.nodes = mesh.nodes + rng.uniform(-amplitude, amplitude, mesh.nodes.shape)
    X = mesh.nodes[mesh.hexes[0]]
    ref = fem.Q2.node_points
    mesh.q2_coords = np.empty_like(mesh.q2_coords)
    mesh.q2_coords[mesh.q2_dofs[0]] = fem.Q1.eval(ref) @ X
    mesh._cache.clear()
    return mesh


def local_vector_dofs(mesh):
    d = mesh.q2_dofs[0]
    return (3 * d[:, None] + np.arange(3)).ravel()


@pytest.fixture
def unit_cube():
    return box_mesh(1, 1, 1, 1.0, 1.0, 1.0)[1]


@pytest.fixture(scope="session")
def small_box():
    return box_mesh(3, 2, 2, 3.0, 2.0, 1.0)
