import numpy as np
import pytest

from autopnp.phantoms import PhantomSpec, generate_phantoms, random_patches


def test_deterministic():
    a = generate_phantoms(PhantomSpec(seed=5), 4)
    b = generate_phantoms(PhantomSpec(seed=5), 4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, generate_phantoms(PhantomSpec(seed=6), 4))


def test_no_shapes_is_uniform():
    imgs = generate_phantoms(PhantomSpec(ellipses=0, rectangles=0), 3)
    for im in imgs:
        assert np.all(im == im[0, 0])


def test_range_contract():
    imgs = generate_phantoms(PhantomSpec(size=32), 100)
    assert imgs.shape == (100, 32, 32)
    assert imgs.min() >= 0 and imgs.max() <= 1


def test_count_validated():
    with pytest.raises(ValueError):
        generate_phantoms(PhantomSpec(), 0)


def test_patches():
    p = random_patches(generate_phantoms(PhantomSpec(size=16), 3), 8, 50, seed=1)
    assert p.shape == (50, 8, 8)
