"""Weight initializers."""
from __future__ import annotations

import numpy as np

from .errors import ConfigurationError


def he_uniform_init(shape, fan_in: int, rng: np.random.Generator,
                    dtype=np.float32) -> np.ndarray:
    """i.i.d. uniform samples in +/- sqrt(6/fan_in)."""
    if fan_in < 1:
        raise ConfigurationError("fan_in must be >= 1")
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def he_uniform_bound(fan_in: int) -> float:
    return float(np.sqrt(6.0 / fan_in))
