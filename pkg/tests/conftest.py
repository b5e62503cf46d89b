import numpy as np
import pytest

from colorpipe import EncodedImage
from datagen import SynthConfig, build_pairs


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def sdr_image(rng):
    codes = np.floor(rng.uniform(0, 1, size=(32, 32, 3)) * 255 + 0.5) / 255
    return EncodedImage(codes, "gamma2p2", "bt709", 8, True)


@pytest.fixture(scope="session")
def small_dataset():
    return build_pairs(SynthConfig(count=6, size=32, seed=3), threads=2)
