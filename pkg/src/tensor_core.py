import logging
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

# Smallest column norm normalize_columns accepts
ZERO_COLUMN_TOL = 1e-12

# Stream purposes; one derived stream per logical use keeps experiments
# reproducible component by component.
STREAM_DICTIONARY = 1
STREAM_CODES = 2
STREAM_NOISE = 3
STREAM_INIT = 4
STREAM_BATCH = 5
STREAM_EVAL = 6
STREAM_PROBE = 7


class DynamicsError(Exception):
    """Base class for all errors raised by the autoencoder dynamics toolkit"""


class ZeroColumn(DynamicsError):
    """Raised when a column cannot be normalized"""
    def __init__(self, index: int, norm: float = 0.0):
        self.index = index
        self.norm = norm
        super().__init__(f"Column {index} has norm {norm:.3e}, below {ZERO_COLUMN_TOL:g}")


class NoConvergence(DynamicsError):
    """Raised when an iterative solver misses its tolerance"""
    def __init__(self, iterations: int, residual: float):
        self.iterations = iterations
        self.residual = residual
        super().__init__(f"No convergence after {iterations} iterations (residual {residual:.3e})")


class MatrixFormatError(DynamicsError):
    """Raised when a matrix text file is malformed"""
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


def derive_rng(seed: int, *stream_key: int) -> np.random.Generator:
    """PCG64 generator for the stream named by (seed, *stream_key)."""
    sequence = np.random.SeedSequence(seed, spawn_key=tuple(stream_key))
    return np.random.Generator(np.random.PCG64(sequence))


class Rng:
    """Seeded random stream identified by (seed, stream_id).

    The stream id is a tuple of non-negative integers fed to the numpy
    SeedSequence spawn key, so children derived with child() are independent
    of each other and of their parent.
    """

    def __init__(self, seed: int, stream_id: Union[int, Tuple[int, ...]] = 0):
        if isinstance(stream_id, int):
            stream_id = (stream_id,)
        if seed < 0 or any(s < 0 for s in stream_id):
            raise ValueError("seed and stream ids must be non-negative")
        self.seed = int(seed)
        self.stream_id = tuple(int(s) for s in stream_id)
        self._generator = derive_rng(self.seed, *self.stream_id)

    @property
    def generator(self) -> np.random.Generator:
        return self._generator

    def child(self, *key: int) -> 'Rng':
        return Rng(self.seed, self.stream_id + tuple(key))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream_id={self.stream_id})"


def as_generator(rng: Union[Rng, np.random.Generator]) -> np.random.Generator:
    if isinstance(rng, Rng):
        return rng.generator
    return rng


def column_norms(M: np.ndarray) -> np.ndarray:
    return np.linalg.norm(M, axis=0)


def max_cross_inner_product(M: np.ndarray) -> float:
    """max_{i != j} |<M_i, M_j>| over column pairs (0 for a single column)."""
    if M.shape[1] < 2:
        return 0.0
    gram = np.abs(M.T @ M)
    np.fill_diagonal(gram, 0.0)
    return float(gram.max())


def normalize_columns(M: np.ndarray) -> np.ndarray:
    """Return a copy of M with every column scaled to unit Euclidean norm."""
    M = np.asarray(M, dtype=np.float64)
    if M.ndim == 1:
        M = M.reshape(-1, 1)
    norms = column_norms(M)
    small = np.flatnonzero(norms < ZERO_COLUMN_TOL)
    if small.size:
        raise ZeroColumn(int(small[0]), float(norms[small[0]]))
    return M / norms


def gaussian_matrix(rows: int, cols: int, scale: float, rng: Union[Rng, np.random.Generator]) -> np.ndarray:
    """I.i.d. N(0, scale^2) entries."""
    if rows < 1 or cols < 1:
        raise ValueError(f"Matrix shape must be positive, got {rows}x{cols}")
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    return scale * as_generator(rng).standard_normal((rows, cols))


def orthonormal_matrix(rows: int, cols: int, rng: Union[Rng, np.random.Generator]) -> np.ndarray:
    """Random matrix with orthonormal columns (requires cols <= rows)."""
    if cols > rows:
        raise ValueError(f"Cannot build {cols} orthonormal columns in dimension {rows}")
    Q, R = np.linalg.qr(gaussian_matrix(rows, cols, 1.0, rng))
    # Sign fix makes the result a deterministic function of the draw
    signs = np.sign(np.diag(R))
    signs[signs == 0] = 1.0
    return Q * signs


def _fix_signs(Q: np.ndarray) -> np.ndarray:
    """Flip columns so the largest-magnitude entry of each is positive."""
    idx = np.argmax(np.abs(Q), axis=0)
    signs = np.sign(Q[idx, np.arange(Q.shape[1])])
    signs[signs == 0] = 1.0
    return Q * signs


def top_singular_vectors(Y: np.ndarray,
                         m: int,
                         max_iters: int = 5000,
                         tol: float = 1e-10,
                         raise_on_failure: bool = False) -> Tuple[np.ndarray, bool]:
    """
    Top-m left singular vectors of Y by orthogonal iteration.

    Works on the smaller of the two Gram matrices Y Y^T and Y^T Y, with a
    Rayleigh-Ritz rotation every sweep. Returns (Q, converged) where Q has
    orthonormal columns ordered by decreasing singular value; the residual
    ||G Q - Q (Q^T G Q)||_F / ||G||_F is driven below tol.
    """
    Y = np.asarray(Y, dtype=np.float64)
    rows, cols = Y.shape
    if m < 1 or m > min(rows, cols):
        raise ValueError(f"m must lie in [1, {min(rows, cols)}], got {m}")
    if not np.any(Y):
        raise ValueError("Y must be nonzero")

    left = rows <= cols
    G = Y @ Y.T if left else Y.T @ Y
    scale = np.linalg.norm(G)

    # Deterministic start
    start = Rng(0, STREAM_PROBE).generator.standard_normal((G.shape[0], m))
    Q, _ = np.linalg.qr(start)

    residual = np.inf
    converged = False
    for iteration in range(1, max_iters + 1):
        Q, _ = np.linalg.qr(G @ Q)
        GQ = G @ Q
        H = Q.T @ GQ
        evals, evecs = np.linalg.eigh((H + H.T) / 2)
        order = np.argsort(evals)[::-1]
        Q = Q @ evecs[:, order]
        GQ = GQ @ evecs[:, order]
        residual = np.linalg.norm(GQ - Q * evals[order]) / scale
        if residual < tol:
            converged = True
            break

    if not converged:
        logger.warning(f"Orthogonal iteration stopped at residual {residual:.3e} after {max_iters} sweeps")
        if raise_on_failure:
            raise NoConvergence(max_iters, residual)

    if not left:
        # Map right singular vectors back to the left ones
        Q, _ = np.linalg.qr(Y @ Q)

    return _fix_signs(Q), converged


def spectral_norm(M: np.ndarray, tol: float = 1e-10, max_iters: int = 20000) -> float:
    """Largest singular value of M by power iteration on its smaller Gram matrix."""
    M = np.asarray(M, dtype=np.float64)
    if M.ndim == 1:
        M = M.reshape(-1, 1)
    if not np.any(M):
        return 0.0

    G = M.T @ M if M.shape[1] <= M.shape[0] else M @ M.T
    v = Rng(0, STREAM_PROBE).generator.standard_normal(G.shape[0])
    v /= np.linalg.norm(v)

    theta = 0.0
    for _ in range(max_iters):
        w = G @ v
        theta = float(v @ w)
        # |theta - eigenvalue| <= ||residual|| for symmetric G
        if np.linalg.norm(w - theta * v) <= tol * abs(theta):
            break
        v = w / np.linalg.norm(w)
    else:
        logger.warning(f"Power iteration hit {max_iters} iterations without reaching tol {tol:g}")

    return float(np.sqrt(max(theta, 0.0)))


def write_matrix(path: Union[str, Path], M: np.ndarray) -> None:
    """Write M as `rows cols` followed by one line of repr'd floats per row."""
    M = np.asarray(M, dtype=np.float64)
    if M.ndim == 1:
        M = M.reshape(-1, 1)
    lines = [f"{M.shape[0]} {M.shape[1]}"]
    lines.extend(' '.join(repr(float(v)) for v in row) for row in M)
    Path(path).write_text('\n'.join(lines) + '\n')


def read_matrix(path: Union[str, Path]) -> np.ndarray:
    path = Path(path)
    lines = [line for line in path.read_text().splitlines() if line.strip()]
    if not lines:
        raise MatrixFormatError(str(path), "empty file")

    try:
        rows, cols = (int(tok) for tok in lines[0].split())
    except ValueError:
        raise MatrixFormatError(str(path), f"bad header {lines[0]!r}")

    if len(lines) - 1 != rows:
        raise MatrixFormatError(str(path), f"expected {rows} rows, found {len(lines) - 1}")

    M = np.empty((rows, cols), dtype=np.float64)
    for r, line in enumerate(lines[1:]):
        values = line.split()
        if len(values) != cols:
            raise MatrixFormatError(str(path), f"row {r + 1} has {len(values)} entries, expected {cols}")
        try:
            M[r] = [float(v) for v in values]
        except ValueError as e:
            raise MatrixFormatError(str(path), f"row {r + 1}: {e}")

    if not np.all(np.isfinite(M)):
        raise MatrixFormatError(str(path), "non-finite entries")
    return M
