"""Tests for named random streams."""

import numpy as np
import pytest

from progtrans import rng


def test_same_path_same_draws():
    a = rng.stream(42, "ocud", 3).random(5)
    b = rng.stream(42, "ocud", 3).random(5)
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize(
    "other",
    [(43, "ocud", 3), (42, "ocud", 4), (42, "mil", 3), (42, "ocud")],
)
def test_different_path_or_seed_differs(other):
    a = rng.stream(42, "ocud", 3).random(5)
    b = rng.stream(*other).random(5)
    assert not np.array_equal(a, b)


def test_negative_seed_rejected():
    with pytest.raises(ValueError):
        rng.stream(-1, "world")
