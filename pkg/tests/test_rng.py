import numpy as np

from pelvicseg.rng import Rng


def test_same_seed_same_stream():
    a = Rng(42).uniform((1000,))
    b = Rng(42).uniform((1000,))
    assert np.array_equal(a, b)


def test_derive_is_independent_and_stable():
    root = Rng(7)
    c1 = root.derive("noise").uniform((100,))
    c2 = root.derive("noise").uniform((100,))
    c3 = root.derive("geometry").uniform((100,))
    assert np.array_equal(c1, c2)
    assert not np.array_equal(c1, c3)


def test_uniform_open_interval():
    u = Rng(0).uniform((200000,))
    assert u.min() > 0.0 and u.max() < 1.0


def test_normal_moments():
    z = Rng(3).normal((200000,))
    assert abs(z.mean()) < 0.01
    assert abs(z.std() - 1.0) < 0.01


def test_integers_range_and_shuffle():
    r = Rng(5)
    v = r.integers(2, 9, (5000,))
    assert v.min() >= 2 and v.max() <= 8
    items = list(range(20))
    shuffled = Rng(6).shuffled(items)
    assert sorted(shuffled) == items and shuffled != items


def test_draws_advance_counter():
    r = Rng(9)
    a = r.uniform((10,))
    b = r.uniform((10,))
    assert not np.array_equal(a, b)
