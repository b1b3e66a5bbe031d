import numpy as np
import pytest

from bdtd import make_random_mdp, uniform_policy
from bdtd.features import scalar_features


@pytest.fixture
def small_mdp():
    return make_random_mdp(5, 4, 2, seed=3)


@pytest.fixture
def small_setup(small_mdp):
    return small_mdp, uniform_policy(small_mdp.action_counts), scalar_features(5, 1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
