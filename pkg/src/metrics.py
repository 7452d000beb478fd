import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .encoder import (
    AutoencoderParams,
    encode_batch,
    sign_consistency_mask,
    support_consistency_mask,
)
from .generative import Dictionary, Family, ModelSpec, SampleBatch, sample_batch, support_moments
from .gradient import GradientEstimate
from .tensor_core import DynamicsError, Rng, column_norms, max_cross_inner_product, normalize_columns, spectral_norm

logger = logging.getLogger(__name__)

# Column norms may deviate from 1 by this much and still count as normalised
NORM_TOL = 1e-6
# Slack for the deterministic claim inequalities
CLAIM_TOL = 1e-12
# Tolerated failure fraction of the high-probability noise bound
NOISE_CLAIM_FAILURE_RATE = 0.01

# Constants in front of the O(.) residual of each correlation inequality,
# fitted at n = m = 32, k = 2, delta = 0.05 (budgets 2.4e-4 and 2.1e-4)
RESIDUAL_CONSTANTS: Dict[Family, float] = {
    Family.GMM: 0.0,
    Family.SPARSE: 1.0,
    Family.NONNEG: 1e-4,
}

CLAIM_COLUMNS = ['claim_id', 'instances', 'violations', 'worst_margin']


class ShapeMismatch(DynamicsError):
    """Raised when two matrices that must be compared differ in shape"""
    def __init__(self, expected, actual):
        self.expected = expected
        self.actual = actual
        super().__init__(f"Shape mismatch: {expected} vs {actual}")


class NotNormalized(DynamicsError):
    """Raised when a column is required to have unit norm"""
    def __init__(self, index: int, norm: float):
        self.index = index
        self.norm = norm
        super().__init__(f"Column {index} has norm {norm:.12g}, expected 1")


class FamilyMismatch(DynamicsError):
    """Raised when a gradient was computed for another model family"""
    def __init__(self, expected, actual):
        self.expected = expected
        self.actual = actual
        super().__init__(f"Gradient computed for family {actual}, expected {expected}")


@dataclass(frozen=True)
class MatchResult:
    """Column i of A is paired with signs[i] * W[:, permutation[i]]."""
    permutation: np.ndarray
    signs: np.ndarray
    per_column_distance: np.ndarray
    frobenius_sq: float

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            'a_column': np.arange(len(self.permutation)),
            'w_column': self.permutation,
            'sign': self.signs.astype(int),
            'distance': self.per_column_distance,
            'frobenius_sq': self.frobenius_sq,
        })


@dataclass(frozen=True)
class ClaimReport:
    claim_id: str
    instances: int
    violations: int
    worst_margin: float

    def passed(self, allowed_fraction: float = 0.0) -> bool:
        return self.violations <= allowed_fraction * self.instances


def _check_normalized(M: np.ndarray) -> None:
    norms = column_norms(M)
    bad = np.flatnonzero(np.abs(norms - 1.0) > NORM_TOL)
    if bad.size:
        raise NotNormalized(int(bad[0]), float(norms[bad[0]]))


def _check_same_shape(W: np.ndarray, A: np.ndarray) -> None:
    if W.shape != A.shape:
        raise ShapeMismatch(A.shape, W.shape)


def incoherence(A: np.ndarray) -> float:
    """mu = sqrt(n) * max_{i != j} |<A_i, A_j>|."""
    _check_normalized(A)
    return math.sqrt(A.shape[0]) * max_cross_inner_product(A)


def linear_assignment(cost: np.ndarray) -> np.ndarray:
    """
    Minimum-cost perfect assignment of a square cost matrix.

    Shortest augmenting path Hungarian method with row/column potentials,
    O(m^3). Returns assignment[row] = column.
    """
    cost = np.asarray(cost, dtype=np.float64)
    m = cost.shape[0]
    if cost.ndim != 2 or cost.shape[1] != m:
        raise ShapeMismatch('square matrix', cost.shape)

    # Index 0 is a virtual column; rows and columns are 1-based below
    u = np.zeros(m + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)  # owner[j] = row assigned to column j
    way = np.zeros(m + 1, dtype=np.int64)

    for row in range(1, m + 1):
        owner[0] = row
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)

        while True:
            used[j0] = True
            i0 = owner[j0]
            free = np.flatnonzero(~used[1:]) + 1
            reduced = cost[i0 - 1, free - 1] - u[i0] - v[free]
            better = reduced < minv[free]
            minv[free[better]] = reduced[better]
            way[free[better]] = j0

            j1 = free[np.argmin(minv[free])]
            delta = minv[j1]

            u[owner[used]] += delta
            v[used] -= delta
            minv[~used] -= delta

            j0 = j1
            if owner[j0] == 0:
                break

        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1

    assignment = np.empty(m, dtype=np.int64)
    assignment[owner[1:] - 1] = np.arange(m)
    return assignment


def _unit_columns(M: np.ndarray) -> bool:
    return bool(np.all(np.abs(column_norms(M) - 1.0) <= NORM_TOL))


def hungarian_match(W: np.ndarray, A: np.ndarray, allow_sign_flip: bool = True) -> MatchResult:
    """Optimal column matching of W onto A, optionally with per-column sign flips."""
    _check_same_shape(W, A)

    if _unit_columns(W) and _unit_columns(A):
        inner = A.T @ W  # inner[i, j] = <A_i, W_j>
        score = np.abs(inner) if allow_sign_flip else inner
        cost = 2.0 - 2.0 * score
    else:
        diff_plus = A.T[:, np.newaxis, :] - W.T[np.newaxis, :, :]
        cost = np.sum(diff_plus ** 2, axis=2)
        if allow_sign_flip:
            diff_minus = A.T[:, np.newaxis, :] + W.T[np.newaxis, :, :]
            cost = np.minimum(cost, np.sum(diff_minus ** 2, axis=2))

    permutation = linear_assignment(cost)
    matched = W[:, permutation]
    signs = np.ones(W.shape[1])
    if allow_sign_flip:
        plus = np.sum((matched - A) ** 2, axis=0)
        minus = np.sum((matched + A) ** 2, axis=0)
        signs[minus < plus] = -1.0

    distances = np.linalg.norm(matched * signs - A, axis=0)
    return MatchResult(permutation=permutation, signs=signs,
                       per_column_distance=distances,
                       frobenius_sq=float(np.sum(distances ** 2)))


def apply_match(W: np.ndarray, match: MatchResult) -> np.ndarray:
    return W[:, match.permutation] * match.signs


def closeness(W: np.ndarray, A: np.ndarray, allow_sign_flip: bool = True) -> Tuple[float, MatchResult]:
    match = hungarian_match(W, A, allow_sign_flip)
    return float(match.per_column_distance.max()), match


def nearness(W: np.ndarray, A: np.ndarray, allow_sign_flip: bool = True) -> Tuple[float, float]:
    """(delta, xi) with xi = ||pi(W) - A|| / ||A|| under the closeness matching."""
    delta, match = closeness(W, A, allow_sign_flip)
    xi = spectral_norm(apply_match(W, match) - A) / spectral_norm(A)
    return delta, xi


def matched_frobenius_error(W: np.ndarray, A: np.ndarray) -> float:
    return hungarian_match(W, A, allow_sign_flip=True).frobenius_sq


def batch_consistency_rate(params: AutoencoderParams, batch: SampleBatch, family: Family) -> float:
    """Fraction of a batch whose codes are recovered (signs for sparse coding, supports otherwise)."""
    _, X = encode_batch(params, batch.Y)
    if family is Family.SPARSE:
        mask = sign_consistency_mask(X, batch.X)
    else:
        mask = support_consistency_mask(X, batch.X)
    return float(np.mean(mask))


def consistency_rate(dictionary: Dictionary, spec: ModelSpec, params: AutoencoderParams,
                     N: int, rng: Union[Rng, np.random.Generator]) -> float:
    if N < 1:
        raise ValueError(f"N must be at least 1, got {N}")
    batch = sample_batch(dictionary, spec, N, rng)
    return batch_consistency_rate(params, batch, spec.family)


def _report(claim_id: str, margins: np.ndarray, tol: float = CLAIM_TOL) -> ClaimReport:
    margins = np.asarray(margins, dtype=np.float64).ravel()
    violations = int(np.sum(margins < -tol))
    worst = float(margins.min()) if margins.size else 0.0
    if violations:
        logger.warning(f"{claim_id}: {violations} of {margins.size} instances violate the bound")
    return ClaimReport(claim_id, int(margins.size), violations, worst)


def verify_claim_bounds(W: np.ndarray, A: np.ndarray, samples: SampleBatch,
                        sigma_eta: float, delta: Optional[float] = None) -> List[ClaimReport]:
    """
    Check the cross-product and noise bounds used by the consistency argument.

    own_alignment:        <W_i, A_i> >= 1 - delta^2 / 2
    cross_alignment:      |<W_i, A_j>| <= mu / sqrt(n) + delta for j != i
    support_cross_energy: sum_{j in S \\ i} <W_i, A_j>^2 <= 2 mu^2 k / n + 2 ||A||^2 delta^2
    noise_projection:     max_i |<W_i, eta>| <= sigma_eta ln n, allowed to fail on 1% of samples

    W is compared with A column by column (no matching).
    """
    _check_same_shape(W, A)
    _check_normalized(W)
    n, m = A.shape
    if delta is None:
        delta = float(np.linalg.norm(W - A, axis=0).max())
    mu = math.sqrt(n) * max_cross_inner_product(A)

    C = W.T @ A  # C[i, j] = <W_i, A_j>
    lam = np.diag(C)
    reports = [_report('own_alignment', lam - (1.0 - delta * delta / 2.0))]

    off = ~np.eye(m, dtype=bool)
    reports.append(_report('cross_alignment', (mu / math.sqrt(n) + delta) - np.abs(C[off])))

    A_norm_sq = spectral_norm(A) ** 2
    cross_sq = C ** 2
    margins = []
    for support in samples.supports:
        S = support[support >= 0]
        bound = 2.0 * mu * mu * len(S) / n + 2.0 * A_norm_sq * delta * delta
        block = cross_sq[np.ix_(S, S)]
        sums = block.sum(axis=1) - np.diag(block)
        margins.append(bound - sums)
    reports.append(_report('support_cross_energy', np.concatenate(margins) if margins else np.empty(0)))

    noise = np.abs(samples.Eta @ W).max(axis=1)
    noise_margins = sigma_eta * math.log(n) - noise
    violations = int(np.sum(noise_margins < 0))
    reports.append(ClaimReport('noise_projection', len(noise_margins), violations, float(noise_margins.min())))
    if violations > NOISE_CLAIM_FAILURE_RATE * len(noise_margins):
        logger.warning(f"noise_projection: {violations} of {len(noise_margins)} noise draws exceed sigma ln n")
    return reports


def combine_reports(reports: Sequence[ClaimReport]) -> List[ClaimReport]:
    """Merge reports sharing a claim id, keeping first-seen order."""
    merged: Dict[str, ClaimReport] = {}
    for r in reports:
        if r.claim_id in merged:
            prev = merged[r.claim_id]
            r = ClaimReport(r.claim_id, prev.instances + r.instances,
                            prev.violations + r.violations, min(prev.worst_margin, r.worst_margin))
        merged[r.claim_id] = r
    return list(merged.values())


def reports_to_frame(reports: Sequence[ClaimReport]) -> pd.DataFrame:
    return pd.DataFrame([[r.claim_id, r.instances, r.violations, r.worst_margin] for r in reports],
                        columns=CLAIM_COLUMNS)


def residual_budget(spec: ModelSpec, p_i: np.ndarray) -> np.ndarray:
    """Per-column allowance for the O(.) remainder of the correlation inequality."""
    C = RESIDUAL_CONSTANTS[spec.family]
    if spec.family is Family.GMM:
        return np.zeros_like(p_i)
    if spec.family is Family.SPARSE:
        return C * p_i * spec.k ** 2 / spec.n ** 2
    ratio = max(1.0, spec.kappa2 / spec.kappa1 ** 2)
    return C * ratio * spec.k ** 2 / (p_i * spec.m)


def correlation_margin(g: GradientEstimate, W: np.ndarray, A: np.ndarray, spec: ModelSpec,
                       delta: Optional[float] = None, include_residual: bool = True) -> np.ndarray:
    """
    Per-column slack of 2<g_i, W_i - A_i> >= a_i ||W_i - A_i||^2 + ||g_i||^2 / c_i - residual_i.

    Gaussian mixture: a_i = p_i (lambda_i - 2 delta^2), c_i = p_i lambda_i.
    Sparse coding:    a_i = p_i lambda_i,               c_i = p_i lambda_i.
    Non-negative:     a_i = kappa2 p_i (lambda_i - 2 delta^2), c_i = kappa2 p_i lambda_i.
    """
    if g.family is not spec.family:
        raise FamilyMismatch(spec.family, g.family)
    _check_same_shape(W, A)

    diff = W - A
    dist_sq = np.sum(diff ** 2, axis=0)
    if delta is None:
        delta = float(np.sqrt(dist_sq.max()))
    lam = np.sum(W * A, axis=0)
    p = support_moments(spec.m, spec.k).p_i

    if spec.family is Family.GMM:
        a, c = p * (lam - 2.0 * delta ** 2), p * lam
    elif spec.family is Family.SPARSE:
        a, c = p * lam, p * lam
    else:
        a, c = spec.kappa2 * p * (lam - 2.0 * delta ** 2), spec.kappa2 * p * lam

    lhs = 2.0 * np.sum(g.G * diff, axis=0)
    rhs = a * dist_sq + np.sum(g.G ** 2, axis=0) / c
    margin = lhs - rhs
    if include_residual:
        margin = margin + residual_budget(spec, p)
    return margin


def maintain_closeness_check(W_prev: np.ndarray, W_tilde: np.ndarray, A: np.ndarray,
                             delta_s: float) -> pd.DataFrame:
    """Per-column contraction of the raw step and distance after normalisation relative to delta_s."""
    _check_same_shape(W_prev, A)
    _check_same_shape(W_tilde, A)
    before = np.linalg.norm(W_prev - A, axis=0)
    raw = np.linalg.norm(W_tilde - A, axis=0)
    after = np.linalg.norm(normalize_columns(W_tilde) - A, axis=0)
    with np.errstate(divide='ignore', invalid='ignore'):
        contraction = np.where(before > 0, raw / before, 0.0)
    return pd.DataFrame({
        'contraction': contraction,
        'normalized_ratio': after / delta_s if delta_s > 0 else np.zeros_like(after),
    })
