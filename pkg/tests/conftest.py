"""Shared fixtures."""

import os
import sys

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np
import pytest

from src.models import init_state
from src.tensor import IndexSet, random_cores, tr_reconstruct


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_cores(rng):
    return random_cores((3, 4, 2), (2, 3, 2), rng)


@pytest.fixture
def small_problem(rng):
    """Exact rank-2 tensor of shape 4x5x3 with roughly 70% of entries observed."""
    cores = random_cores((4, 5, 3), 2, rng)
    t = tr_reconstruct(cores)
    mask = IndexSet.from_mask(rng.random(t.shape) < 0.7)
    return t, mask


@pytest.fixture
def small_state(small_problem):
    t, mask = small_problem
    return init_state(t, mask, r_init=3, seed=7)
