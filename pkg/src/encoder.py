import logging
import math
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np

from .generative import Family, InvalidModelSpec, LatentCode, ModelSpec
from .tensor_core import DynamicsError

logger = logging.getLogger(__name__)


class DimensionMismatch(DynamicsError):
    """Raised when a vector or matrix does not fit the autoencoder shape"""
    def __init__(self, expected, actual):
        self.expected = expected
        self.actual = actual
        super().__init__(f"Dimension mismatch: expected {expected}, got {actual}")


class InvalidActivation(DynamicsError):
    """Raised for an unknown activation or a non-positive threshold"""


@dataclass(frozen=True)
class Activation:
    kind: str  # 'relu' or 'threshold'
    lam: Optional[float] = None

    RELU = 'relu'
    THRESHOLD = 'threshold'

    @classmethod
    def relu(cls) -> 'Activation':
        return cls(cls.RELU)

    @classmethod
    def threshold(cls, lam: float) -> 'Activation':
        return cls(cls.THRESHOLD, float(lam)).validate()

    def validate(self) -> 'Activation':
        if self.kind == self.RELU:
            return self
        if self.kind != self.THRESHOLD:
            raise InvalidActivation(f"Unknown activation {self.kind!r}")
        if self.lam is None or not self.lam > 0:
            raise InvalidActivation(f"Threshold activation needs lambda > 0, got {self.lam}")
        return self

    def __call__(self, z: np.ndarray) -> np.ndarray:
        if self.kind == self.RELU:
            return np.maximum(z, 0.0)
        # The boundary |z| == lambda fires
        return np.where(np.abs(z) >= self.lam, z, 0.0)

    def __str__(self) -> str:
        return 'relu' if self.kind == self.RELU else f"threshold({self.lam!r})"


@dataclass(frozen=True)
class AutoencoderParams:
    W: np.ndarray
    b: np.ndarray
    activation: Activation

    def __post_init__(self):
        if self.W.ndim != 2:
            raise DimensionMismatch('2-d weight matrix', self.W.shape)
        if self.b.shape != (self.W.shape[1],):
            raise DimensionMismatch((self.W.shape[1],), self.b.shape)
        self.activation.validate()

    @property
    def n(self) -> int:
        return self.W.shape[0]

    @property
    def m(self) -> int:
        return self.W.shape[1]

    def with_weights(self, W: np.ndarray) -> 'AutoencoderParams':
        return replace(self, W=W)

    def with_bias(self, b: np.ndarray) -> 'AutoencoderParams':
        return replace(self, b=b)


@dataclass(frozen=True)
class Encoding:
    z: np.ndarray
    x: np.ndarray


def _check_input(params: AutoencoderParams, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (params.n,):
        raise DimensionMismatch((params.n,), y.shape)
    return y


def encode(params: AutoencoderParams, y: np.ndarray) -> Encoding:
    y = _check_input(params, y)
    z = params.W.T @ y + params.b
    return Encoding(z=z, x=params.activation(z))


def decode(params: AutoencoderParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.m,):
        raise DimensionMismatch((params.m,), x.shape)
    return params.W @ x


def loss(params: AutoencoderParams, y: np.ndarray) -> float:
    """Half squared reconstruction error of one input."""
    residual = y - decode(params, encode(params, y).x)
    return 0.5 * float(residual @ residual)


def encode_batch(params: AutoencoderParams, Y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Row-wise encode of an (N, n) batch; returns (Z, X), both (N, m)."""
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim != 2 or Y.shape[1] != params.n:
        raise DimensionMismatch(('N', params.n), Y.shape)
    Z = Y @ params.W + params.b
    return Z, params.activation(Z)


def batch_loss(params: AutoencoderParams, Y: np.ndarray) -> float:
    _, X = encode_batch(params, Y)
    R = Y - X @ params.W.T
    return 0.5 * float(np.einsum('ij,ij->', R, R)) / Y.shape[0]


def support_consistent(x: np.ndarray, code: LatentCode) -> bool:
    return set(np.flatnonzero(x).tolist()) == set(code.support)


def sign_consistent(x: np.ndarray, code: LatentCode) -> bool:
    return bool(np.array_equal(np.sign(x), np.sign(code.dense(len(x)))))


def support_consistency_mask(X: np.ndarray, X_true: np.ndarray) -> np.ndarray:
    """Per-row support agreement between encoded and true dense codes."""
    return np.all((X != 0) == (X_true != 0), axis=1)


def sign_consistency_mask(X: np.ndarray, X_true: np.ndarray) -> np.ndarray:
    return np.all(np.sign(X) == np.sign(X_true), axis=1)


def relu_bias_interval(a1: float, a2: float, delta: float, k: int,
                       noise_margin: float = 0.0) -> Tuple[float, float]:
    """
    Bias interval under which ReLU encoding recovers non-negative k-sparse supports.

    [-(1 - delta) a1 + a2 delta sqrt(k) + margin, -a2 delta sqrt(k) - margin],
    where noise_margin bounds |<W_i, eta>| (sigma_eta ln n w.h.p.).
    """
    spread = a2 * delta * math.sqrt(k)
    low = -(1.0 - delta) * a1 + spread + noise_margin
    high = -spread - noise_margin
    if low > high:
        raise InvalidModelSpec('b', f"empty ReLU bias interval [{low:.4g}, {high:.4g}] "
                                    f"for a1={a1}, a2={a2}, delta={delta}, k={k}")
    return low, high


def gmm_relu_bias_interval(delta: float) -> Tuple[float, float]:
    low, high = -1.0 + 2.0 * delta, -2.0 * delta
    if low > high:
        raise InvalidModelSpec('b', f"empty ReLU bias interval for delta={delta}")
    return low, high


def recovery_params(spec: ModelSpec, W: np.ndarray, delta: float, activation: str) -> AutoencoderParams:
    """
    Encoder with the biases and threshold under which supports are recovered.

    Thresholding uses lambda = a1/2 with b = 0; ReLU uses the midpoint of the
    family's bias interval (not available for signed sparse codes).
    """
    m = W.shape[1]
    if activation == Activation.THRESHOLD:
        return AutoencoderParams(W, np.zeros(m), Activation.threshold(spec.a1 / 2.0))
    if activation != Activation.RELU:
        raise InvalidActivation(f"Unknown activation {activation!r}")

    if spec.family is Family.GMM:
        low, high = gmm_relu_bias_interval(delta)
    elif spec.family is Family.NONNEG:
        margin = spec.sigma_eta * math.log(spec.n)
        low, high = relu_bias_interval(spec.a1, spec.a2, delta, spec.k, noise_margin=margin)
    else:
        raise InvalidActivation("ReLU cannot recover signed sparse codes; use thresholding")

    bias = (low + high) / 2.0
    logger.debug(f"ReLU bias {bias:.4f} chosen from [{low:.4f}, {high:.4f}]")
    return AutoencoderParams(W, np.full(m, bias), Activation.relu())
