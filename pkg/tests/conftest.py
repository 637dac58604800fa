import os

import numpy as np
import pytest
from hypothesis import settings

from grbffd import sample_points

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def ellipse_well_400():
    return sample_points("ellipse1d", 400, mode="well_sampled")


@pytest.fixture(scope="session")
def ellipse_random_1600():
    return sample_points("ellipse1d", 1600, mode="random", seed=0)


@pytest.fixture(scope="session")
def rbc_800():
    return sample_points("rbc2d", 800, seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
