"""Parameter initializers."""
from __future__ import annotations

import numpy as np

from .engine import Tensor


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, slope: float = 0.0, dtype=np.float32) -> np.ndarray:
    gain = np.sqrt(2.0 / (1.0 + slope ** 2))
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def param(data: np.ndarray, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def zeros(shape, name: str, dtype) -> Tensor:
    return param(np.zeros(shape, dtype=dtype), name)


def ones(shape, name: str, dtype) -> Tensor:
    return param(np.ones(shape, dtype=dtype), name)
