import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from xct import geometry, matrixstore


@pytest.fixture(scope="session")
def geom32():
    return geometry.make_geometry(48, 1, 32, 0.0, np.pi)


@pytest.fixture(scope="session")
def matrix32(geom32):
    return geometry.build_system_matrix(geom32)


@pytest.fixture(scope="session")
def block32(matrix32):
    return matrixstore.block_from_matrix(matrix32)


@pytest.fixture(scope="session")
def geom64():
    return geometry.make_geometry(96, 1, 64, 0.0, np.pi)


@pytest.fixture(scope="session")
def matrix64(geom64):
    return geometry.build_system_matrix(geom64)
