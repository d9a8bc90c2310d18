import numpy as np
import pytest

from kdvstab.discretization import build_generator, build_grid
from kdvstab.gramian import assemble_sylvester


@pytest.fixture(scope="session")
def gen64():
    return build_generator(build_grid(1.0, 64))


@pytest.fixture(scope="session")
def gen128():
    return build_generator(build_grid(1.0, 128))


@pytest.fixture(scope="session")
def gen_odd():
    return build_generator(build_grid(1.0, 65))


@pytest.fixture(scope="session")
def gram64(gen64):
    return assemble_sylvester(gen64, 1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def band_limited(gen, y, omega_max=6000.0):
    """Projection of ``y`` onto the eigenmodes of ``A`` with ``|omega| <= omega_max``."""
    w, V = np.linalg.eigh(1j * gen.A)
    keep = np.abs(w) <= omega_max
    P = V[:, keep]
    return np.real(P @ (P.conj().T @ y))


@pytest.fixture
def low_mode_state():
    return band_limited
