import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "repo", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow], derandomize=True
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "repo"))


@pytest.fixture(autouse=True)
def _fresh_tape():
    from splatstream import tensor as tn

    tn.get_tape().reset()
    yield
    tn.get_tape().reset()


@pytest.fixture(scope="session")
def small_scene():
    """One 60-frame 32x32 synthetic scene shared across tests."""
    from splatstream import synthscene as ss

    return ss.generate_sample(ss.SceneSpec(seed=5, n_frames=60, resolution=32))


@pytest.fixture(scope="session")
def scene64():
    from splatstream import synthscene as ss

    return ss.generate_sample(ss.SceneSpec(seed=3, n_frames=60, resolution=64))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
