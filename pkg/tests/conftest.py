import numpy as np
import pytest

from caecodec import transforms as TR
from caecodec.data import synth_image


@pytest.fixture(scope="session")
def tiny_cfg():
    return TR.make_config("tiny", lam=0.01)


@pytest.fixture(scope="session")
def tiny_params(tiny_cfg):
    return TR.init_weights(tiny_cfg, seed=0)


@pytest.fixture(scope="session")
def hybrid_cfg():
    return TR.make_config("tiny-hybrid", lam=0.01)


@pytest.fixture(scope="session")
def hybrid_params(hybrid_cfg):
    return TR.init_weights(hybrid_cfg, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def image64():
    return synth_image(np.random.default_rng(5), 64, 64)
