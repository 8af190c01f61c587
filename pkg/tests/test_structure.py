import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import helpers
from layercka import structure
from layercka.cka import CKAMatrix
from layercka.errors import DimensionMismatch, TooFewLayers, UndefinedCells


def two_blocks(n=6, cut=3, hi=1.0, lo=0.0):
    m = np.full((n, n), lo)
    m[:cut, :cut] = hi
    m[cut:, cut:] = hi
    return m


def test_perfect_blocks():
    s = structure.detect_block_split(two_blocks())
    assert s.split_index == 2 and s.block_score == pytest.approx(1.0)
    assert s.block_score == s.profile.max()


def test_constant_matrix():
    s = structure.detect_block_split(np.full((5, 5), 0.7))
    assert s.split_index == 0 and s.block_score == 0.0
    assert np.all(s.profile == 0.0)


def test_noisy_blocks_match_brute_force():
    rng = np.random.default_rng(42)
    m = np.where(two_blocks(8, 4) > 0, 0.9, 0.1) + rng.uniform(-0.05, 0.05, (8, 8))
    m = (m + m.T) / 2
    s = structure.detect_block_split(m)
    assert s.split_index == helpers.brute_force_split(m)[0] == 3


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 12), st.integers(0, 2**32 - 1), st.floats(-5, 5))
def test_shift_invariance(n, seed, c):
    r = np.random.default_rng(seed)
    m = r.uniform(size=(n, n))
    a, b = structure.detect_block_split(m), structure.detect_block_split(m + c)
    assert a.split_index == b.split_index
    assert a.block_score == pytest.approx(b.block_score, abs=1e-9)


def test_block_contrast():
    assert structure.block_contrast(two_blocks(), two_blocks()) == 0.0
    assert structure.block_contrast(two_blocks(), np.full((6, 6), 0.5)) == pytest.approx(1.0)
    rng = np.random.default_rng(0)
    a, b = rng.uniform(size=(5, 5)), rng.uniform(size=(5, 5))
    assert structure.block_contrast(a, b) == pytest.approx(-structure.block_contrast(b, a))
    with pytest.raises(DimensionMismatch):
        structure.block_contrast(np.eye(3), np.eye(4))


def test_errors():
    with pytest.raises(TooFewLayers):
        structure.detect_block_split(np.ones((1, 1)))
    with pytest.raises(DimensionMismatch):
        structure.detect_block_split(np.ones((2, 3)))
    defined = np.ones((3, 3), bool)
    defined[0, 1] = False
    with pytest.raises(UndefinedCells):
        structure.detect_block_split(CKAMatrix("a", "a", np.eye(3), 10, defined))


def test_defined_layers_drops_zero_variance_layer():
    defined = np.ones((4, 4), bool)
    defined[0, :] = defined[:, 0] = False
    m = CKAMatrix("a", "a", two_blocks(4, 2), 10, defined)
    sub, keep = structure.defined_layers(m)
    assert keep == [1, 2, 3] and sub.shape == (3, 3)
    assert np.array_equal(sub, two_blocks(4, 2)[1:, 1:])
