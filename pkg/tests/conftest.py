import numpy as np
import pytest

from hfcalderon.geometry import MetricSpec


def _c_bump(pts):
    return 1.0 + 0.1 * np.exp(-np.sum(pts**2, axis=1))


@pytest.fixture(scope="session")
def bump_metric():
    """Grid-conformal metric with ``c = 1 + 0.1 exp(-|x|^2)``."""
    return MetricSpec.grid_conformal(_c_bump, spacing=0.05)


@pytest.fixture(scope="session")
def bump_factor():
    return _c_bump


@pytest.fixture(scope="session")
def expq_metric():
    """Grid-conformal metric with ``c = exp(|x|^2 / 10)``."""
    return MetricSpec.grid_conformal(lambda p: np.exp(np.sum(p**2, axis=1) / 10.0), spacing=0.05)


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)
