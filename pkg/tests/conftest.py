import numpy as np
import pytest

from dereverb.dsp import generate_corpus
from dereverb.model import ModelConfig, init_model

TOY_CONFIG = dict(X=2, R=2, N=32, B=16, H=32, L_BL=16)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_wd_model():
    return init_model(ModelConfig(variant="wd-tcn", **TOY_CONFIG), seed=0)


@pytest.fixture
def toy_tcn_model():
    return init_model(ModelConfig(variant="tcn", **TOY_CONFIG), seed=0)


@pytest.fixture(scope="session")
def small_corpus():
    # 1 s clips keep unit tests quick; acceptance uses the full 4 s protocol
    return generate_corpus(8, 1.0, 8000, (0.1, 1.0), seed=7)
