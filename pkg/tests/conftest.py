import numpy as np
import pytest

from clusterfl.data import ImageDataset, load_digits_pool
from clusterfl.nn import NetworkSpec


@pytest.fixture(scope="session")
def pool() -> ImageDataset:
    return load_digits_pool(shift=1)


@pytest.fixture(scope="session")
def small_pool(pool) -> ImageDataset:
    return pool.subset(np.arange(3000))


@pytest.fixture
def tiny_spec() -> NetworkSpec:
    return NetworkSpec((8, 8, 1), 4, 10, "SAE", 1.0, (2, 3))


@pytest.fixture
def toy_set(pool) -> ImageDataset:
    return pool.subset(np.arange(64))
