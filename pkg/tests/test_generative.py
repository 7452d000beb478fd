import math
from itertools import combinations

import numpy as np
import pytest

from src.generative import (
    Dictionary,
    Family,
    InvalidModelSpec,
    LatentCode,
    ModelSpec,
    Sample,
    SampleBatch,
    code_moments,
    delta_close_weights,
    sample_batch,
    sample_code,
    sample_dictionary,
    support_moments,
    uniform_magnitude_upper,
)
from src.tensor_core import Rng, column_norms, max_cross_inner_product


def test_factories_fill_family_constants():
    gmm = ModelSpec.gmm(784, 10, 0.01)
    sparse = ModelSpec.sparse_coding(256, 50, 3)
    nonneg = ModelSpec.nonneg_sparse(256, 50, 3, a1=0.5, a2=1.0)

    assert (gmm.k, gmm.kappa1, gmm.kappa2) == (1, 1.0, 1.0)
    assert (sparse.kappa1, sparse.kappa2) == (0.0, 1.0)
    assert nonneg.kappa1 == pytest.approx(0.75)
    assert nonneg.kappa2 == pytest.approx(7.0 / 12.0)


@pytest.mark.parametrize("build", [
    lambda: ModelSpec(Family.GMM, 10, 5, k=2).validate(),
    lambda: ModelSpec.gmm(10, 5, sigma_eta=-0.1),
    lambda: ModelSpec.sparse_coding(10, 5, 6),
    lambda: ModelSpec.sparse_coding(10, 5, 2, a1=1.5, magnitude_law='uniform_magnitude'),
    lambda: ModelSpec.sparse_coding(10, 5, 2, magnitude_law='laplace'),
    lambda: ModelSpec.nonneg_sparse(10, 5, 2, a1=1.0, a2=0.5),
    lambda: ModelSpec(Family.NONNEG, 10, 5, 2, kappa1=0.5, kappa2=0.5, a1=0.5, a2=1.0).validate(),
    lambda: ModelSpec.gmm(0, 5),
])
def test_invalid_specs_rejected(build):
    with pytest.raises(InvalidModelSpec):
        build()


def test_uniform_magnitude_upper_has_unit_second_moment():
    for a1 in (0.1, 0.5, 0.9):
        b = uniform_magnitude_upper(a1)
        assert (a1 * a1 + a1 * b + b * b) / 3.0 == pytest.approx(1.0, abs=1e-12)


def test_code_moments_match_sampler():
    spec = ModelSpec.nonneg_sparse(8, 6, 2, a1=0.5, a2=1.0)
    batch = sample_batch(sample_dictionary(spec, Rng(1)), spec, 50_000, Rng(2))
    values = batch.X[batch.X != 0]
    kappa1, kappa2 = code_moments(spec)

    assert values.mean() == pytest.approx(kappa1, abs=0.01)
    assert np.mean(values ** 2) == pytest.approx(kappa2, abs=0.01)


def test_sample_dictionary_unit_columns(gmm_spec):
    d = sample_dictionary(gmm_spec, Rng(3))

    assert np.allclose(column_norms(d.A), 1.0, atol=1e-14)
    assert d.mu == pytest.approx(math.sqrt(64) * max_cross_inner_product(d.A))


def test_orthonormal_dictionary_is_incoherent(orthonormal_dictionary):
    assert orthonormal_dictionary.mu < 1e-10


def test_orthonormal_dictionary_needs_m_le_n():
    spec = ModelSpec.sparse_coding(8, 16, 2)
    with pytest.raises(ValueError):
        sample_dictionary(spec, Rng(0), orthonormal=True)


def test_dictionary_save_load(tmp_path, gaussian_dictionary):
    path = tmp_path / "dictionary.mat"
    gaussian_dictionary.save(path)

    loaded = Dictionary.load(path)

    assert np.allclose(loaded.A, gaussian_dictionary.A, atol=1e-15)
    assert loaded.mu == pytest.approx(gaussian_dictionary.mu)


@pytest.mark.parametrize("spec", [
    ModelSpec.gmm(16, 6, 0.1),
    ModelSpec.sparse_coding(16, 6, 3, 0.1),
    ModelSpec.sparse_coding(16, 6, 3, 0.1, a1=0.5, magnitude_law='uniform_magnitude'),
    ModelSpec.nonneg_sparse(16, 6, 3, a1=0.5, a2=1.0, sigma_eta=0.1),
])
def test_sample_batch_structure(spec):
    """y = A x + eta, with exactly k nonzeros drawn from the family's value law"""
    dictionary = sample_dictionary(spec, Rng(0, 1))
    batch = sample_batch(dictionary, spec, 500, Rng(0, 2))

    assert batch.Y.shape == (500, 16) and batch.X.shape == (500, 6)
    assert np.allclose(batch.Y, batch.X @ dictionary.A.T + batch.Eta, atol=1e-12)
    assert np.all(np.count_nonzero(batch.X, axis=1) == spec.k)
    assert np.all(np.take_along_axis(batch.X, batch.supports, axis=1) != 0)

    values = batch.X[batch.X != 0]
    if spec.family is Family.GMM:
        assert np.all(values == 1.0)
    elif spec.family is Family.SPARSE and spec.magnitude_law == 'rademacher':
        assert set(np.unique(values)) == {-1.0, 1.0}
    elif spec.family is Family.SPARSE:
        assert np.all(np.abs(values) >= spec.a1)
        assert np.all(np.abs(values) <= uniform_magnitude_upper(spec.a1))
    else:
        assert np.all((values >= spec.a1) & (values <= spec.a2))


def test_noiseless_batch_has_zero_noise(gmm_spec, orthonormal_dictionary):
    batch = sample_batch(orthonormal_dictionary, gmm_spec, 10, Rng(1))
    assert not np.any(batch.Eta)


def test_sample_batch_is_deterministic(gmm_spec, gaussian_dictionary):
    first = sample_batch(gaussian_dictionary, gmm_spec, 100, Rng(9, 5))
    second = sample_batch(gaussian_dictionary, gmm_spec, 100, Rng(9, 5))
    assert np.array_equal(first.Y, second.Y)


def test_support_frequencies_are_uniform():
    spec = ModelSpec.sparse_coding(20, 10, 3)
    batch = sample_batch(sample_dictionary(spec, Rng(0)), spec, 20_000, Rng(1))
    freq = np.mean(batch.X != 0, axis=0)
    assert np.allclose(freq, 0.3, atol=0.02)


def test_sample_batch_rejects_wrong_dictionary(gmm_spec):
    wrong = sample_dictionary(ModelSpec.gmm(64, 4), Rng(0))
    with pytest.raises(InvalidModelSpec):
        sample_batch(wrong, gmm_spec, 10, Rng(0))


def test_sample_code_is_sorted_support():
    spec = ModelSpec.sparse_coding(10, 8, 3)
    code = sample_code(spec, Rng(4))

    assert len(code.support) == 3
    assert list(code.support) == sorted(code.support)
    assert np.count_nonzero(code.dense(8)) == 3


def test_batch_indexing_yields_samples(gmm_spec, gaussian_dictionary):
    batch = sample_batch(gaussian_dictionary, gmm_spec, 5, Rng(1))

    sample = batch[2]
    assert np.array_equal(sample.y, batch.Y[2])
    assert np.array_equal(sample.code.dense(8), batch.X[2])
    assert len(list(batch)) == 5
    assert len(batch[1:3]) == 2

    restacked = SampleBatch.from_samples(list(batch), 8)
    assert np.array_equal(restacked.X, batch.X)


def test_from_samples_pads_supports():
    samples = [
        LatentCode((0,), np.array([1.0])),
        LatentCode((1, 2), np.array([1.0, -1.0])),
    ]
    batch = SampleBatch.from_samples(
        [Sample(c.dense(3), c, np.zeros(3)) for c in samples], 3)

    assert batch.supports.tolist() == [[0, -1], [1, 2]]


def test_support_moments_exact_values():
    moments = support_moments(6, 3)

    assert np.allclose(moments.p_i, 0.5)
    assert moments.p_ij[0, 1] == pytest.approx(3 * 2 / (6 * 5))
    assert moments.p_ij[2, 2] == 0.0
    assert moments.p_ijl[0, 1, 2] == pytest.approx(3 * 2 * 1 / (6 * 5 * 4))
    assert moments.p_ijl[0, 0, 2] == 0.0
    assert moments.supports.shape == (math.comb(6, 3), 3)


def test_support_moments_match_enumeration():
    """Inclusion probabilities equal the counted fraction of enumerated supports"""
    moments = support_moments(7, 3)
    supports = [set(s) for s in combinations(range(7), 3)]
    both = sum(1 for s in supports if {1, 4} <= s) / len(supports)

    assert moments.p_ij[1, 4] == pytest.approx(both, abs=1e-15)


def test_delta_close_weights_exact_distance(orthonormal_dictionary):
    A = orthonormal_dictionary.A
    W = delta_close_weights(A, 0.3, Rng(0))

    assert np.allclose(column_norms(W), 1.0, atol=1e-12)
    assert np.allclose(np.linalg.norm(W - A, axis=0), 0.3, atol=1e-12)


def test_delta_close_weights_range():
    with pytest.raises(ValueError):
        delta_close_weights(np.eye(3), 2.5, Rng(0))
