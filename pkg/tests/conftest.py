import numpy as np
import pytest
from hypothesis import settings

from hyperadapt import data
from hyperadapt.training import prepare_task

settings.register_profile("repo", deadline=None, max_examples=25, derandomize=True)
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_config():
    return data.SyntheticConfig(group_sizes=(150, 90, 60))


@pytest.fixture(scope="session")
def small_dataset(small_config):
    return data.generate(small_config, 0)


@pytest.fixture(scope="session")
def small_task(small_dataset):
    return prepare_task(small_dataset, data.split(small_dataset, 0))
