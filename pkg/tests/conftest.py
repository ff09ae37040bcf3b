import numpy as np
import pytest

from holovol.optics import OpticalConfig


@pytest.fixture
def config() -> OpticalConfig:
    return OpticalConfig()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
