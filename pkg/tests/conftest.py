import numpy as np
import pytest
from hypothesis import settings

from qssm.data import toy_dataset

settings.register_profile("desk", deadline=None, max_examples=25)
settings.load_profile("desk")


@pytest.fixture(scope="session")
def toy_images():
    return toy_dataset()


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
