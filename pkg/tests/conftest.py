import numpy as np
import pytest
import torch

from hoicap.geometry import box_mesh, egg_mesh
from hoicap.render import Camera

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def egg():
    return egg_mesh()


@pytest.fixture(scope="session")
def small_egg():
    # coarse version for finite-difference loops
    return egg_mesh(n_lon=12, n_lat=9)


@pytest.fixture(scope="session")
def cube():
    return box_mesh((0.1, 0.1, 0.1))


@pytest.fixture(scope="session")
def cam64():
    return Camera.simple(80.0, 64, 64)


def central_difference(f, x, h):
    """Numerical gradient of scalar f at x by central differences."""
    x = np.asarray(x, float)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance
    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.RESULTS:
            terminalreporter.write_line(line)
