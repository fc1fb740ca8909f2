import numpy as np
import pytest

from biice.model import BiIceConfig, BiIceParams
from biice.numerics import make_rng


def random_params(config: BiIceConfig, seed: int = 0, jitter: float = 0.3) -> BiIceParams:
    """Initialised params plus noise so no tensor sits at a special value."""
    rng = make_rng(seed)
    params = BiIceParams.init(config, rng)
    for t in params.named_tensors().values():
        t += rng.normal(0.0, jitter, t.shape)
    return params


@pytest.fixture
def small_config():
    return BiIceConfig(n_concepts=4, dim=8, n_patches=6, n_classes=3, n_global=1)


@pytest.fixture
def small_params(small_config):
    return random_params(small_config, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
