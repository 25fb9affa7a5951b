import os
import tempfile

# lagflow.log reads the log directory at import time
os.environ.setdefault("LAGFLOW_LOG_DIR", tempfile.mkdtemp(prefix="lagflow-test-logs-"))

import numpy as np
import pytest

from lagflow.fields import catalog_field
from lagflow.mesh import build_mesh
from lagflow.solver import catalog_density


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def constant_field():
    return catalog_field("constant", {"velocity": [0.3, -0.2]})


@pytest.fixture
def rotation_field():
    return catalog_field("rigid_rotation_patch")


@pytest.fixture
def cartesian4():
    return build_mesh("cartesian", 4)


@pytest.fixture
def uniform_density():
    return catalog_density("uniform", 2)
