import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .encoder import AutoencoderParams, DimensionMismatch, encode
from .generative import Family, ModelSpec, Sample, SampleBatch, support_moments
from .tensor_core import DynamicsError

logger = logging.getLogger(__name__)

DEFAULT_SHARD_SIZE = 2048


class EmptyBatch(DynamicsError):
    """Raised when a gradient is requested over zero samples"""
    def __init__(self):
        super().__init__("Cannot estimate a gradient from an empty batch")


@dataclass(frozen=True)
class GradientEstimate:
    """
    Per-column weight gradients G (n x m) and bias gradients g_b (m,).

    n_samples counts the samples behind a Monte Carlo estimate and is 0 for
    closed-form results, which carry the family they were computed for.
    G_se and g_b_se are per-entry standard errors of Monte Carlo means.
    """
    G: np.ndarray
    g_b: np.ndarray
    n_samples: int
    family: Optional[Family] = None
    G_se: Optional[np.ndarray] = None
    g_b_se: Optional[np.ndarray] = None

    def __post_init__(self):
        if not (np.all(np.isfinite(self.G)) and np.all(np.isfinite(self.g_b))):
            raise ValueError("Gradient estimate has non-finite entries")

    @property
    def is_oracle(self) -> bool:
        return self.n_samples == 0

    def column_se(self) -> np.ndarray:
        """Standard error of each column as a vector: sqrt(sum_r se_ri^2)."""
        if self.G_se is None:
            return np.zeros(self.G.shape[1])
        return np.sqrt(np.sum(self.G_se ** 2, axis=0))


def approx_gradient_sample(params: AutoencoderParams, y: np.ndarray) -> GradientEstimate:
    """Approximate gradient of the loss at a single input, indicator in place of sigma'."""
    enc = encode(params, y)
    active = enc.x != 0
    r = y - params.W @ enc.x
    q = params.W.T @ r

    G = -(np.outer(r, enc.z * active) + np.outer(y, q * active))
    g_b = -(q * active)
    return GradientEstimate(G=G, g_b=g_b, n_samples=1)


def _shard_moments(params: AutoencoderParams, Y: np.ndarray) -> Tuple[np.ndarray, ...]:
    """Sums and sums of squares of per-sample gradients over one shard."""
    Z = Y @ params.W + params.b
    X = params.activation(Z)
    M = (X != 0).astype(np.float64)
    R = Y - X @ params.W.T
    Q = R @ params.W

    CM = Z * M
    QM = Q * M
    G_sum = -(R.T @ CM + Y.T @ QM)
    gb_sum = -QM.sum(axis=0)

    # Entrywise square of -(c_i r + q_i y), expanded so no (N, n, m) array is built
    G_sq = (R * R).T @ (CM * Z) + 2.0 * (R * Y).T @ (CM * Q) + (Y * Y).T @ (QM * Q)
    gb_sq = (QM * Q).sum(axis=0)
    return G_sum, gb_sum, G_sq, gb_sq


def _pairwise_reduce(parts: List[Tuple[np.ndarray, ...]]) -> Tuple[np.ndarray, ...]:
    """Fixed-order pairwise tree sum; shape of the tree depends only on len(parts)."""
    while len(parts) > 1:
        merged = [tuple(a + b for a, b in zip(parts[i], parts[i + 1]))
                  for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            merged.append(parts[-1])
        parts = merged
    return parts[0]


def _as_data(params: AutoencoderParams, samples: Union[SampleBatch, Sequence[Sample], np.ndarray]) -> np.ndarray:
    if isinstance(samples, SampleBatch):
        Y = samples.Y
    elif isinstance(samples, np.ndarray):
        Y = samples
    else:
        if len(samples) == 0:
            raise EmptyBatch()
        Y = SampleBatch.from_samples(samples, params.m).Y

    if Y.ndim != 2 or Y.shape[0] == 0:
        raise EmptyBatch()
    if Y.shape[1] != params.n:
        raise DimensionMismatch(('N', params.n), Y.shape)
    return Y


def batch_gradient(params: AutoencoderParams,
                   samples: Union[SampleBatch, Sequence[Sample], np.ndarray],
                   shard_size: int = DEFAULT_SHARD_SIZE,
                   workers: int = 1) -> GradientEstimate:
    """
    Mean approximate gradient over a batch, with per-entry standard errors.

    Samples are split into consecutive blocks of shard_size; shard sums are
    combined by a pairwise tree in index order, so the result is bitwise
    identical for any number of workers.
    """
    Y = _as_data(params, samples)
    N = Y.shape[0]
    if shard_size < 1:
        raise ValueError(f"shard_size must be positive, got {shard_size}")

    blocks = [Y[start:start + shard_size] for start in range(0, N, shard_size)]
    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda block: _shard_moments(params, block), blocks))
    else:
        parts = [_shard_moments(params, block) for block in blocks]

    G_sum, gb_sum, G_sq, gb_sq = _pairwise_reduce(parts)
    G = G_sum / N
    g_b = gb_sum / N

    if N > 1:
        G_var = np.maximum(G_sq - N * G * G, 0.0) / (N - 1)
        gb_var = np.maximum(gb_sq - N * g_b * g_b, 0.0) / (N - 1)
        G_se, g_b_se = np.sqrt(G_var / N), np.sqrt(gb_var / N)
    else:
        G_se, g_b_se = np.zeros_like(G), np.zeros_like(g_b)

    logger.debug(f"Batch gradient over {N} samples in {len(blocks)} shards")
    return GradientEstimate(G=G, g_b=g_b, n_samples=N, G_se=G_se, g_b_se=g_b_se)


def expected_gradient_gmm(W: np.ndarray, b: np.ndarray, A: np.ndarray) -> GradientEstimate:
    """
    Closed-form expected gradient for the Gaussian mixture with uniform p_i = 1/m.

    g_i = -p lambda_i A_i + p (lambda_i + b_i)^2 W_i with lambda_i = <W_i, A_i>.
    The bias gradient is +p b_i: on a consistent sample from component i the
    residual satisfies W_i^T (y - W x) = -b_i.
    """
    m = W.shape[1]
    p = 1.0 / m
    lam = np.sum(W * A, axis=0)
    G = -p * lam * A + p * (lam + b) ** 2 * W
    return GradientEstimate(G=G, g_b=p * b, n_samples=0, family=Family.GMM)


def _pair_matrix(p_ij: Union[float, np.ndarray], m: int) -> np.ndarray:
    P = np.full((m, m), float(p_ij)) if np.isscalar(p_ij) else np.array(p_ij, dtype=np.float64)
    np.fill_diagonal(P, 0.0)
    return P


def expected_gradient_sparse(W: np.ndarray, A: np.ndarray,
                             p_i: Union[float, np.ndarray],
                             p_ij: Union[float, np.ndarray]) -> GradientEstimate:
    """Leading four terms of the sparse-coding expected gradient at zero bias."""
    m = W.shape[1]
    p = np.broadcast_to(np.asarray(p_i, dtype=np.float64), (m,))
    P = _pair_matrix(p_ij, m)

    lam = np.sum(W * A, axis=0)
    C = W.T @ A
    # K[j, i] = p_ij <W_j, A_i>
    K = P.T * C
    WK = W @ K
    G = -p * lam * A + p * lam ** 2 * W + lam * WK + np.sum(W * WK, axis=0) * A
    return GradientEstimate(G=G, g_b=np.zeros(m), n_samples=0, family=Family.SPARSE)


def _triple_sums(p_ijl: Union[float, np.ndarray], C: np.ndarray,
                 Gw: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    sum_{j,l} p_ijl C_ij C_il and sum_{j,l} p_ijl Gw_ij C_jl over distinct i, j, l.

    A scalar p_ijl reduces both sums to row sums, so no (m, m, m) array is formed.
    """
    if not np.isscalar(p_ijl):
        P3 = np.asarray(p_ijl, dtype=np.float64)
        return np.einsum('ijl,ij,il->i', P3, C, C), np.einsum('ijl,ij,jl->i', P3, Gw, C)

    p3 = float(p_ijl)
    lam = np.diag(C)
    C_off = C - np.diag(lam)
    G_off = Gw - np.diag(np.diag(Gw))
    row = C_off.sum(axis=1)
    # (sum_j C_ij)^2 - sum_j C_ij^2 over j != i
    cc = row ** 2 - np.sum(C_off ** 2, axis=1)
    # for each j != i: sum over l not in {i, j} of C_jl
    gc = G_off @ row - np.sum(G_off * C_off.T, axis=1)
    return p3 * cc, p3 * gc


def nonneg_coefficients(W: np.ndarray, b: np.ndarray, A: np.ndarray,
                        kappa1: float, kappa2: float,
                        p_i: Union[float, np.ndarray],
                        p_ij: Union[float, np.ndarray],
                        p_ijl: Union[float, np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """Coefficients (alpha, beta) with g_i = alpha_i W_i - beta_i A_i + e_i."""
    m = W.shape[1]
    p = np.broadcast_to(np.asarray(p_i, dtype=np.float64), (m,))
    P2 = _pair_matrix(p_ij, m)

    C = W.T @ A      # C[i, j] = <W_i, A_j>
    Gw = W.T @ W     # Gw[i, j] = <W_i, W_j>
    lam = np.diag(C)
    k1sq = kappa1 * kappa1

    pair_C = np.sum(P2 * C, axis=1)
    triple_CC, triple_GC = _triple_sums(p_ijl, C, Gw)
    alpha =(kappa2 * p * lam ** 2
             + kappa2 * np.sum(P2 * C ** 2, axis=1)
             + 2.0 * k1sq * lam * pair_C
             + k1sq * triple_CC
             + 2.0 * kappa1 * p * b * lam
             + 2.0 * kappa1 * b * pair_C
             + p * b ** 2)

    beta = (kappa2 * p * lam
            - kappa2 * np.sum(P2 * Gw * C.T, axis=1)
            + k1sq * pair_C
            - k1sq * np.sum(P2 * Gw * lam[np.newaxis, :], axis=1)
            - k1sq * triple_GC
            - kappa1 * b * np.sum(P2 * Gw, axis=1))
    return alpha, beta


def expected_gradient_nonneg(W: np.ndarray, b: np.ndarray, A: np.ndarray, spec: ModelSpec,
                             p_i: Union[float, np.ndarray],
                             p_ij: Union[float, np.ndarray],
                             p_ijl: Union[float, np.ndarray]) -> GradientEstimate:
    """
    alpha_i W_i - beta_i A_i for the non-negative family.

    The remainder e_i is not computed; callers must allow for
    ||e_i|| = O(max(kappa1^2, kappa2^2) p_i k / m).
    """
    alpha, beta = nonneg_coefficients(W, b, A, spec.kappa1, spec.kappa2, p_i, p_ij, p_ijl)
    G = alpha * W - beta * A
    return GradientEstimate(G=G, g_b=np.zeros(W.shape[1]), n_samples=0, family=Family.NONNEG)


def expected_gradient_exact(W: np.ndarray, b: np.ndarray, A: np.ndarray, spec: ModelSpec) -> GradientEstimate:
    """
    Exact expectation of the approximate gradient for noiseless, support-consistent encoding.

    Enumerates every support of the uniform size-k law. On a support S with
    P = I - W_S W_S^T and a_S = sum_{j in S} A_j, the code second moment is
    M_S = (kappa2 - kappa1^2) A_S A_S^T + kappa1^2 a_S a_S^T, and the residual
    is r = P y - W_S b_S.
    """
    n, m = W.shape
    moments = support_moments(m, spec.k)
    if moments.supports is None:
        raise ValueError(f"Too many supports to enumerate for m={m}, k={spec.k}")

    k1 = spec.kappa1
    var = spec.kappa2 - k1 * k1
    prob = 1.0 / moments.supports.shape[0]

    G = np.zeros((n, m))
    g_b = np.zeros(m)
    for S in moments.supports:
        WS, AS, bS = W[:, S], A[:, S], b[S]
        aS = AS.sum(axis=1)
        gram = WS.T @ WS

        PW = WS - WS @ gram
        MW = var * AS @ (AS.T @ WS) + k1 * k1 * np.outer(aS, aS @ WS)
        PMW = MW - WS @ (WS.T @ MW)
        MPW = var * AS @ (AS.T @ PW) + k1 * k1 * np.outer(aS, aS @ PW)

        wa = WS.T @ aS
        WSbS = WS @ bS
        Pa = aS - WS @ wa
        u = gram @ bS

        term = (PMW + MPW
                - k1 * np.outer(WSbS, wa)
                + k1 * np.outer(Pa, bS)
                - np.outer(WSbS, bS)
                - k1 * np.outer(aS, u))
        G[:, S] -= prob * term
        g_b[S] -= prob * (k1 * (WS.T @ Pa) - u)

    return GradientEstimate(G=G, g_b=g_b, n_samples=0, family=spec.family)


def expected_gradient(W: np.ndarray, b: np.ndarray, A: np.ndarray, spec: ModelSpec) -> GradientEstimate:
    """Closed-form oracle matching the model family."""
    if spec.family is Family.GMM:
        return expected_gradient_gmm(W, b, A)
    moments = support_moments(spec.m, spec.k)
    if spec.family is Family.SPARSE:
        return expected_gradient_sparse(W, A, moments.p1, moments.p2)
    return expected_gradient_nonneg(W, b, A, spec, moments.p1, moments.p2, moments.p3)
