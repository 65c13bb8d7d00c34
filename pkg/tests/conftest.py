import numpy as np
import pytest

from lucidcam.data import DataGenConfig, generate_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_dataset(DataGenConfig(60, size=32, seed=7))
