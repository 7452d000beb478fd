import os
import sys

import numpy as np
import pytest

# Add the project root directory to the Python path
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from src.generative import ModelSpec, delta_close_weights, sample_dictionary
from src.tensor_core import Rng


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def gmm_spec():
    return ModelSpec.gmm(64, 8)


@pytest.fixture
def sparse_spec():
    return ModelSpec.sparse_coding(32, 32, 2)


@pytest.fixture
def nonneg_spec():
    return ModelSpec.nonneg_sparse(32, 32, 2, a1=0.5, a2=1.0)


@pytest.fixture
def orthonormal_dictionary(gmm_spec):
    """64x8 dictionary with exactly orthonormal columns"""
    return sample_dictionary(gmm_spec, Rng(7, 1), orthonormal=True)


@pytest.fixture
def gaussian_dictionary(gmm_spec):
    return sample_dictionary(gmm_spec, Rng(7, 2))


@pytest.fixture
def close_weights():
    """Factory for unit-column weights at exact column distance delta from A"""
    def make(A: np.ndarray, delta: float, seed: int = 0) -> np.ndarray:
        return delta_close_weights(A, delta, Rng(seed, 99))
    return make
