import numpy as np
import pytest

from dpglab.numerics import RandomStream
from dpglab.schedule import build_linear_schedule


def one_step_schedule(alpha_bar: float):
    """Schedule whose step 1 has the requested ``alpha_bar``."""
    return build_linear_schedule(1, 1.0 - alpha_bar, 1.0 - alpha_bar)


@pytest.fixture(scope="session")
def sched():
    return build_linear_schedule()


@pytest.fixture
def rng():
    return RandomStream(1234).child("test").generator()


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(1e-300, float(np.max(np.abs(b)))))
