import numpy as np
import pytest

from pelvicseg.rng import Rng
from pelvicseg.volcore import Spacing, Volume


@pytest.fixture
def spacing():
    return Spacing()


@pytest.fixture
def rng():
    return Rng(1234)


def random_volume(seed: int, shape=(16, 16, 16), spacing=None) -> Volume:
    r = Rng(seed)
    data = (r.uniform(shape) * 1000.0).astype(np.float32)
    return Volume(data, spacing or Spacing())


def random_mask(seed: int, shape=(12, 12, 12), density=0.2) -> np.ndarray:
    r = Rng(seed)
    m = r.uniform(shape) < density
    if not m.any():
        m[tuple(s // 2 for s in shape)] = True
    return m
