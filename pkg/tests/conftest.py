import numpy as np
import pytest

from safewalk.model import nominal_model


@pytest.fixture(scope="session")
def model():
    return nominal_model()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_configuration(rng, model, scale=0.6):
    """A random configuration inside the joint-limit box."""
    q = np.empty(5)
    for i, (lo, hi) in enumerate(model.joint_limits):
        mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
        q[i] = mid + scale * half * rng.uniform(-1.0, 1.0)
    return q
