import numpy as np
import pytest

from eqfa.data import random_motion


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def generic_cloud(rng, n=12, scales=(1.0, 2.0, 3.0)):
    """Random cloud with a well-separated covariance spectrum."""
    return rng.standard_normal((n, 3)) * np.asarray(scales)


def motions(rng, count, scale=2.0, reflections=True):
    return [random_motion(rng, scale, reflections=reflections) for _ in range(count)]


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(b))))
