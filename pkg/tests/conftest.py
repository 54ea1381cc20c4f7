import numpy as np
import pytest

from bcsr_eit.mesh import generate_cylinder_mesh, generate_disk_mesh
from bcsr_eit.protocol import adjacent_protocol


@pytest.fixture(scope="session")
def small_disk():
    return generate_disk_mesh(n_rings=6)


@pytest.fixture(scope="session")
def disk_2k():
    # 24 rings -> 2081 nodes, the ~2000-node reference disk
    return generate_disk_mesh(n_rings=24)


@pytest.fixture(scope="session")
def small_cylinder():
    return generate_cylinder_mesh(n_layers=4, rings=2, electrodes_per_ring=8, n_rings_2d=3)


@pytest.fixture(scope="session")
def adj16():
    return adjacent_protocol(16)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
