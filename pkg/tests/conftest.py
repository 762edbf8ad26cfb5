import numpy as np
import pytest

from vit5 import tensor as T
from vit5.config import ModelConfig


@pytest.fixture
def f64():
    with T.precision("f64"):
        yield


@pytest.fixture
def tiny_cfg():
    return ModelConfig(layers=2, dim=16, heads=2, registers=2, patch=2, image_size=8, num_classes=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
