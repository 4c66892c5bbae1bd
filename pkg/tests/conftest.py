import numpy as np
import pytest
from hypothesis import settings

from mocoreg.phantom import blobs_phantom

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture(scope="session")
def blobs48():
    return blobs_phantom((48, 48, 48), 4.0, seed=1)


@pytest.fixture(scope="session")
def blobs32():
    return blobs_phantom((32, 32, 32), 6.0, seed=0, extent=0.28)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
