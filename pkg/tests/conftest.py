import numpy as np
import pytest

from skbv.sampler import SamplerConfig
from skbv.simbench import SimDesign, simulate


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_sim():
    """One small simulated dataset with a strong clustered signal."""
    design = SimDesign(
        n=120,
        n_g=120,
        n_u=300,
        n_relevant=12,
        n_clusters=3,
        effect_size=1.0,
        seed=99,
    )
    return simulate(design)


@pytest.fixture
def fast_config():
    return SamplerConfig(n_iter=1200, n_burn=600, n_thin=10, seed=4)
