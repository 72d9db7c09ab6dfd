import numpy as np
import pytest

from cuetrack.config import TrainConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_cfg():
    return TrainConfig(d_model=8, n_geo_layers=1, n_cue_layers=1, epochs=1, mini_seq_len=4, seed=3)
