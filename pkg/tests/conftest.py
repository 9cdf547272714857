import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cascadenet import tensor as T

settings.register_profile(
    "default", max_examples=30, deadline=None,
    suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(autouse=True)
def _finite_checks():
    """Assert no op produces NaN/Inf during unit tests."""
    T.set_debug_checks(True)
    yield
    T.set_debug_checks(False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
