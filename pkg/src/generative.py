import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from itertools import combinations
from pathlib import Path
from collections.abc import Sequence
from typing import Iterator, Optional, Tuple, Union

import numpy as np

from .cache import CacheManager
from .tensor_core import (
    DynamicsError,
    Rng,
    as_generator,
    gaussian_matrix,
    max_cross_inner_product,
    normalize_columns,
    orthonormal_matrix,
    read_matrix,
    write_matrix,
)

logger = logging.getLogger(__name__)

# Above this many supports the exact enumeration is not materialised
MAX_ENUMERATED_SUPPORTS = 250_000

_moment_cache = CacheManager()


class InvalidModelSpec(DynamicsError):
    """Raised when model parameters violate the generative assumptions"""
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"Invalid model parameter '{field}': {message}")


class Family(str, Enum):
    GMM = 'gmm'
    SPARSE = 'sparse'
    NONNEG = 'nonneg'


def uniform_magnitude_upper(a1: float) -> float:
    """Upper end b of Uniform[a1, b] whose second moment is exactly 1."""
    return (-a1 + math.sqrt(12.0 - 3.0 * a1 * a1)) / 2.0


@dataclass(frozen=True)
class ModelSpec:
    family: Family
    n: int
    m: int
    k: int = 1
    kappa1: float = 1.0
    kappa2: float = 1.0
    a1: float = 1.0
    a2: float = 1.0
    sigma_eta: float = 0.0
    magnitude_law: str = 'rademacher'  # SparseCoding only: 'rademacher' or 'uniform_magnitude'

    @classmethod
    def gmm(cls, n: int, m: int, sigma_eta: float = 0.0) -> 'ModelSpec':
        return cls(Family.GMM, n, m, 1, 1.0, 1.0, 1.0, 1.0, sigma_eta).validate()

    @classmethod
    def sparse_coding(cls, n: int, m: int, k: int, sigma_eta: float = 0.0,
                      a1: float = 1.0, magnitude_law: str = 'rademacher') -> 'ModelSpec':
        return cls(Family.SPARSE, n, m, k, 0.0, 1.0, a1, math.inf, sigma_eta, magnitude_law).validate()

    @classmethod
    def nonneg_sparse(cls, n: int, m: int, k: int, a1: float = 0.5, a2: float = 1.0,
                      sigma_eta: float = 0.0) -> 'ModelSpec':
        kappa1 = (a1 + a2) / 2.0
        kappa2 = (a1 * a1 + a1 * a2 + a2 * a2) / 3.0
        return cls(Family.NONNEG, n, m, k, kappa1, kappa2, a1, a2, sigma_eta).validate()

    def validate(self) -> 'ModelSpec':
        if not isinstance(self.family, Family):
            raise InvalidModelSpec('family', f"unknown family {self.family!r}")
        if self.n < 1 or self.m < 1:
            raise InvalidModelSpec('n/m', f"dimensions must be positive, got n={self.n}, m={self.m}")
        if not 1 <= self.k <= self.m:
            raise InvalidModelSpec('k', f"need 1 <= k <= m, got k={self.k}, m={self.m}")
        if self.sigma_eta < 0:
            raise InvalidModelSpec('sigma_eta', f"must be non-negative, got {self.sigma_eta}")

        if self.family is Family.GMM:
            if self.k != 1:
                raise InvalidModelSpec('k', "mixture of Gaussians requires k = 1")
            for name in ('kappa1', 'kappa2', 'a1', 'a2'):
                if getattr(self, name) != 1.0:
                    raise InvalidModelSpec(name, "mixture of Gaussians requires value 1")
        elif self.family is Family.SPARSE:
            if self.kappa1 != 0.0 or self.kappa2 != 1.0:
                raise InvalidModelSpec('kappa', "sparse coding requires kappa1 = 0, kappa2 = 1")
            if not 0.0 < self.a1 <= 1.0:
                raise InvalidModelSpec('a1', f"sparse coding requires 0 < a1 <= 1, got {self.a1}")
            if self.magnitude_law not in ('rademacher', 'uniform_magnitude'):
                raise InvalidModelSpec('magnitude_law', f"unknown law {self.magnitude_law!r}")
            if self.magnitude_law == 'rademacher' and self.a1 != 1.0:
                raise InvalidModelSpec('a1', "Rademacher codes have a1 = 1; use magnitude_law='uniform_magnitude'")
        else:
            if not 0.0 < self.a1 <= self.a2 < math.inf:
                raise InvalidModelSpec('a1/a2', f"need 0 < a1 <= a2 < inf, got a1={self.a1}, a2={self.a2}")
            kappa1, kappa2 = code_moments(self)
            if abs(self.kappa1 - kappa1) > 1e-12 or abs(self.kappa2 - kappa2) > 1e-12:
                raise InvalidModelSpec('kappa', f"kappa1/kappa2 must match Uniform[a1, a2]: ({kappa1}, {kappa2})")
        return self


def code_moments(spec: ModelSpec) -> Tuple[float, float]:
    """Conditional mean and second moment of a nonzero code entry as sampled."""
    if spec.family is Family.GMM:
        return 1.0, 1.0
    if spec.family is Family.SPARSE:
        return 0.0, 1.0
    a1, a2 = spec.a1, spec.a2
    return (a1 + a2) / 2.0, (a1 * a1 + a1 * a2 + a2 * a2) / 3.0


@dataclass(frozen=True)
class Dictionary:
    A: np.ndarray
    mu: float

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.A.shape[1]

    @classmethod
    def from_matrix(cls, A: np.ndarray) -> 'Dictionary':
        A = normalize_columns(A)
        return cls(A=A, mu=math.sqrt(A.shape[0]) * max_cross_inner_product(A))

    def save(self, path: Union[str, Path]) -> None:
        write_matrix(path, self.A)

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'Dictionary':
        return cls.from_matrix(read_matrix(path))


@dataclass(frozen=True)
class LatentCode:
    support: Tuple[int, ...]
    values: np.ndarray

    def dense(self, m: int) -> np.ndarray:
        x = np.zeros(m)
        x[list(self.support)] = self.values
        return x


@dataclass(frozen=True)
class Sample:
    y: np.ndarray
    code: LatentCode
    eta: np.ndarray


@dataclass
class SampleBatch(Sequence):
    """Stacked samples; rows of Y, X and Eta belong to the same draw."""
    Y: np.ndarray
    X: np.ndarray
    Eta: np.ndarray
    supports: np.ndarray

    def __len__(self) -> int:
        return self.Y.shape[0]

    def __getitem__(self, index):
        if isinstance(index, slice):
            return SampleBatch(self.Y[index], self.X[index], self.Eta[index], self.supports[index])
        support = tuple(int(j) for j in self.supports[index])
        code = LatentCode(support, self.X[index, list(support)].copy())
        return Sample(self.Y[index], code, self.Eta[index])

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self[i]

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], m: int) -> 'SampleBatch':
        if isinstance(samples, SampleBatch):
            return samples
        samples = list(samples)
        if not samples:
            raise ValueError("Cannot stack an empty sample list")
        Y = np.stack([s.y for s in samples])
        X = np.stack([s.code.dense(m) for s in samples])
        Eta = np.stack([s.eta for s in samples])
        k = max(len(s.code.support) for s in samples)
        supports = np.full((len(samples), k), -1, dtype=np.int64)
        for row, s in enumerate(samples):
            supports[row, :len(s.code.support)] = s.code.support
        return cls(Y, X, Eta, supports)


@dataclass(frozen=True)
class SupportMoments:
    """
    Inclusion probabilities of the uniform size-k support law.

    The law is exchangeable: p1, p2 and p3 are the probabilities that one, two
    or three given distinct indices all lie in the support. The dense arrays
    are built on access; p_ijl alone takes 8 m^3 bytes.
    """
    m: int
    k: int
    p1: float
    p2: float
    p3: float
    supports: Optional[np.ndarray] = field(default=None, repr=False)  # (C(m, k), k)

    @property
    def p_i(self) -> np.ndarray:
        return np.full(self.m, self.p1)

    @property
    def p_ij(self) -> np.ndarray:
        P = np.full((self.m, self.m), self.p2)
        np.fill_diagonal(P, 0.0)
        return P

    @property
    def p_ijl(self) -> np.ndarray:
        return distinct_triple_tensor(self.m, self.p3)


def support_moments(m: int, k: int) -> SupportMoments:
    """Exact inclusion probabilities of the uniform size-k support law (memoised)."""
    return _moment_cache.get_or_compute(('support_moments', m, k), lambda: _compute_support_moments(m, k))


def distinct_triple_tensor(m: int, value: float) -> np.ndarray:
    """(m, m, m) tensor holding value on index triples that are pairwise distinct."""
    P3 = np.full((m, m, m), value)
    idx = np.arange(m)
    P3[idx, idx, :] = 0.0
    P3[idx, :, idx] = 0.0
    P3[:, idx, idx] = 0.0
    return P3


def _compute_support_moments(m: int, k: int) -> SupportMoments:
    if not 1 <= k <= m:
        raise InvalidModelSpec('k', f"need 1 <= k <= m, got k={k}, m={m}")

    p1 = k / m
    p2 = k * (k - 1) / (m * (m - 1)) if m > 1 else 0.0
    p3 = k * (k - 1) * (k - 2) / (m * (m - 1) * (m - 2)) if m > 2 else 0.0

    supports = None
    if math.comb(m, k) <= MAX_ENUMERATED_SUPPORTS:
        supports = np.array(list(combinations(range(m), k)), dtype=np.int64).reshape(-1, k)
    else:
        logger.debug(f"Skipping support enumeration for m={m}, k={k}")

    return SupportMoments(m, k, p1, p2, p3, supports)


def sample_dictionary(spec: ModelSpec, rng: Union[Rng, np.random.Generator],
                      orthonormal: bool = False) -> Dictionary:
    """Gaussian dictionary with N(0, 1/n) entries, column-normalised.

    With orthonormal=True the columns are made exactly orthonormal (m <= n),
    which gives mu = 0.
    """
    if orthonormal:
        A = orthonormal_matrix(spec.n, spec.m, rng)
    else:
        A = gaussian_matrix(spec.n, spec.m, 1.0 / math.sqrt(spec.n), rng)
    dictionary = Dictionary.from_matrix(A)
    logger.debug(f"Sampled {spec.n}x{spec.m} dictionary with mu={dictionary.mu:.4f}")
    return dictionary


def _draw_supports(spec: ModelSpec, N: int, gen: np.random.Generator) -> np.ndarray:
    if spec.k == 1:
        return gen.integers(0, spec.m, size=(N, 1))
    # Prefix of a uniform random permutation is a uniform size-k subset
    keys = gen.random((N, spec.m))
    supports = np.argpartition(keys, spec.k - 1, axis=1)[:, :spec.k]
    return np.sort(supports, axis=1)


def _draw_values(spec: ModelSpec, shape: Tuple[int, int], gen: np.random.Generator) -> np.ndarray:
    if spec.family is Family.GMM:
        return np.ones(shape)
    if spec.family is Family.SPARSE:
        signs = 2.0 * gen.integers(0, 2, size=shape) - 1.0
        if spec.magnitude_law == 'rademacher':
            return signs
        return signs * gen.uniform(spec.a1, uniform_magnitude_upper(spec.a1), size=shape)
    return gen.uniform(spec.a1, spec.a2, size=shape)


def sample_codes(spec: ModelSpec, N: int, rng: Union[Rng, np.random.Generator]) -> Tuple[np.ndarray, np.ndarray]:
    """Draw N codes; returns (supports (N, k), dense codes (N, m))."""
    gen = as_generator(rng)
    supports = _draw_supports(spec, N, gen)
    values = _draw_values(spec, supports.shape, gen)
    X = np.zeros((N, spec.m))
    np.put_along_axis(X, supports, values, axis=1)
    return supports, X


def sample_code(spec: ModelSpec, rng: Union[Rng, np.random.Generator]) -> LatentCode:
    supports, X = sample_codes(spec, 1, rng)
    support = tuple(int(j) for j in supports[0])
    return LatentCode(support, X[0, list(support)].copy())


def sample_batch(dictionary: Dictionary, spec: ModelSpec, N: int,
                 rng: Union[Rng, np.random.Generator]) -> SampleBatch:
    """N independent draws of y = A x* + eta with the latent parts retained."""
    if N < 1:
        raise ValueError(f"Batch size must be at least 1, got {N}")
    if dictionary.A.shape != (spec.n, spec.m):
        raise InvalidModelSpec('n/m', f"dictionary shape {dictionary.A.shape} does not match ({spec.n}, {spec.m})")

    gen = as_generator(rng)
    supports, X = sample_codes(spec, N, gen)
    if spec.sigma_eta > 0:
        Eta = spec.sigma_eta * gen.standard_normal((N, spec.n))
    else:
        Eta = np.zeros((N, spec.n))
    Y = X @ dictionary.A.T + Eta
    return SampleBatch(Y, X, Eta, supports)


def delta_close_weights(A: np.ndarray, delta: float, rng: Union[Rng, np.random.Generator]) -> np.ndarray:
    """Unit columns W_i with ||W_i - A_i|| == delta exactly, in random directions."""
    if not 0.0 <= delta <= 2.0:
        raise ValueError(f"delta must lie in [0, 2], got {delta}")
    gen = as_generator(rng)
    A = normalize_columns(A)
    U = gen.standard_normal(A.shape)
    U -= A * np.sum(U * A, axis=0)
    U = normalize_columns(U)
    # Chord length 2 sin(theta / 2) == delta
    theta = 2.0 * math.asin(delta / 2.0)
    return math.cos(theta) * A + math.sin(theta) * U
