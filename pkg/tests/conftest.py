import numpy as np
import pytest

from blink.data import generate_dataset, generate_scene
from blink.model import ModelConfig, ToyMLLM, init_weights


@pytest.fixture(scope="session")
def model_config():
    return ModelConfig()


@pytest.fixture(scope="session")
def model(model_config):
    return ToyMLLM(model_config, init_weights(model_config))


@pytest.fixture(scope="session")
def scene():
    return generate_scene(7, "easy")


@pytest.fixture(scope="session")
def scenes():
    return generate_dataset(8, 123, "easy")


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
