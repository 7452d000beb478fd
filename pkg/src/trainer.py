import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Union

import numpy as np
import pandas as pd

from .encoder import Activation, AutoencoderParams, batch_loss
from .generative import Dictionary, Family, ModelSpec, SampleBatch, sample_batch
from .gradient import DEFAULT_SHARD_SIZE, GradientEstimate, batch_gradient, expected_gradient
from .metrics import batch_consistency_rate, closeness
from .tensor_core import (
    STREAM_BATCH,
    STREAM_EVAL,
    STREAM_INIT,
    DynamicsError,
    Rng,
    gaussian_matrix,
    normalize_columns,
    spectral_norm,
    top_singular_vectors,
)

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ['iter', 'loss', 'frob_err', 'delta', 'consistency_rate', 'bias_max', 'contraction']


class MissingGroundTruth(DynamicsError):
    """Raised when an operation needs the ground-truth dictionary"""
    def __init__(self, operation: str):
        self.operation = operation
        super().__init__(f"{operation} requires the ground-truth dictionary")


class MissingData(DynamicsError):
    """Raised when an operation needs a data batch"""
    def __init__(self, operation: str):
        self.operation = operation
        super().__init__(f"{operation} requires a data batch")


class InvalidTrainConfig(DynamicsError):
    """Raised when training parameters are out of range"""
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"Invalid training parameter '{field}': {message}")


@dataclass(frozen=True)
class BiasRule:
    kind: str = 'zero'  # 'zero', 'geometric' or 'sqrt_contraction'
    C: float = 2.0
    b0: float = 0.0
    tau: float = 0.0

    @classmethod
    def zero(cls) -> 'BiasRule':
        return cls('zero')

    @classmethod
    def geometric(cls, C: float, b0: float) -> 'BiasRule':
        return cls('geometric', C=C, b0=b0)

    @classmethod
    def sqrt_contraction(cls, tau: float, b0: float) -> 'BiasRule':
        return cls('sqrt_contraction', tau=tau, b0=b0)

    def validate(self) -> 'BiasRule':
        if self.kind == 'zero':
            return self
        if self.kind == 'geometric':
            if not self.C > 1:
                raise InvalidTrainConfig('bias_rule.C', f"must exceed 1, got {self.C}")
        elif self.kind == 'sqrt_contraction':
            if not 0 < self.tau < 1:
                raise InvalidTrainConfig('bias_rule.tau', f"must lie in (0, 1), got {self.tau}")
        else:
            raise InvalidTrainConfig('bias_rule', f"unknown rule {self.kind!r}")
        if not self.b0 < 0:
            raise InvalidTrainConfig('bias_rule.b0', f"must be negative, got {self.b0}")
        return self

    def initial(self, m: int) -> np.ndarray:
        return np.full(m, 0.0 if self.kind == 'zero' else self.b0)


@dataclass(frozen=True)
class InitScheme:
    kind: str = 'perturbed'  # 'perturbed', 'pca' or 'random'
    delta: float = 0.5

    @classmethod
    def perturbed(cls, delta: float) -> 'InitScheme':
        return cls('perturbed', delta)

    @classmethod
    def pca(cls) -> 'InitScheme':
        return cls('pca', 0.0)

    @classmethod
    def random(cls) -> 'InitScheme':
        return cls('random', 0.0)

    def __str__(self) -> str:
        return f"perturbed({self.delta!r})" if self.kind == 'perturbed' else self.kind


@dataclass(frozen=True)
class GradientSource:
    kind: str = 'monte_carlo'  # 'monte_carlo' or 'oracle'
    batch_size: int = 10_000

    @classmethod
    def monte_carlo(cls, batch_size: int = 10_000) -> 'GradientSource':
        return cls('monte_carlo', batch_size)

    @classmethod
    def oracle(cls) -> 'GradientSource':
        return cls('oracle', 0)


@dataclass(frozen=True)
class TrainConfig:
    zeta: float
    T: int
    bias_rule: BiasRule = field(default_factory=BiasRule.zero)
    init: InitScheme = field(default_factory=InitScheme)
    gradient_source: GradientSource = field(default_factory=GradientSource)
    activation: Activation = field(default_factory=Activation.relu)
    seed: int = 0
    project_nearness: bool = False
    fresh_batches: bool = True
    workers: int = 1
    shard_size: int = DEFAULT_SHARD_SIZE
    eval_size: int = 2000  # trace batch for oracle runs

    def validate(self) -> 'TrainConfig':
        if not self.zeta > 0:
            raise InvalidTrainConfig('zeta', f"must be positive, got {self.zeta}")
        if self.T < 0:
            raise InvalidTrainConfig('T', f"must be non-negative, got {self.T}")
        if self.init.kind not in ('perturbed', 'pca', 'random'):
            raise InvalidTrainConfig('init', f"unknown scheme {self.init.kind!r}")
        if self.init.kind == 'perturbed' and self.init.delta < 0:
            raise InvalidTrainConfig('init.delta', f"must be non-negative, got {self.init.delta}")
        if self.gradient_source.kind not in ('monte_carlo', 'oracle'):
            raise InvalidTrainConfig('gradient_source', f"unknown source {self.gradient_source.kind!r}")
        if self.gradient_source.kind == 'monte_carlo' and self.gradient_source.batch_size < 1:
            raise InvalidTrainConfig('batch_size', f"must be positive, got {self.gradient_source.batch_size}")
        if self.workers < 1 or self.shard_size < 1 or self.eval_size < 1:
            raise InvalidTrainConfig('workers/shard_size/eval_size', "must be positive")
        self.bias_rule.validate()
        self.activation.validate()
        return self


class TrainTrace:
    """One row per iteration s = 0..T, in the fixed CSV column order."""

    def __init__(self, frame: Optional[pd.DataFrame] = None):
        self._frame = frame
        self._rows: List[list] = []

    @property
    def frame(self) -> pd.DataFrame:
        if self._frame is None:
            self._frame = pd.DataFrame(self._rows, columns=TRACE_COLUMNS)
        return self._frame

    def record(self, s: int, loss: float, frob_err: float, delta: float,
               consistency_rate: float, bias_max: float, contraction: float) -> None:
        if self._frame is not None and not self._rows:
            self._rows = self._frame.values.tolist()
        self._rows.append([s, loss, frob_err, delta, consistency_rate, bias_max, contraction])
        self._frame = None

    def __len__(self) -> int:
        return len(self.frame)

    def column(self, name: str) -> np.ndarray:
        return self.frame[name].to_numpy(dtype=np.float64)

    def to_csv(self, path: Union[str, Path]) -> None:
        self.frame.to_csv(path, index=False, float_format='%.17g', na_rep='nan')

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> 'TrainTrace':
        frame = pd.read_csv(path)
        if list(frame.columns) != TRACE_COLUMNS:
            raise ValueError(f"{path}: unexpected trace header {list(frame.columns)}")
        return cls(frame)


def default_learning_rate(spec: ModelSpec) -> float:
    if spec.family is Family.GMM:
        return float(spec.m)
    return spec.m / spec.k


def init_weights(scheme: InitScheme, spec: ModelSpec, rng: Union[Rng, np.random.Generator],
                 dictionary: Optional[Dictionary] = None,
                 data: Optional[Union[SampleBatch, np.ndarray]] = None,
                 bias_rule: Optional[BiasRule] = None,
                 activation: Optional[Activation] = None) -> AutoencoderParams:
    """
    Starting point of gradient descent.

    perturbed: normalize(A + delta E) with E_ij ~ N(0, 1/n)
    pca:       top-m left singular vectors of the data (samples as columns)
    random:    normalised Gaussian columns
    """
    bias_rule = bias_rule or BiasRule.zero()
    activation = activation or Activation.relu()
    n, m = spec.n, spec.m

    if scheme.kind == 'perturbed':
        if dictionary is None:
            raise MissingGroundTruth('perturbed initialisation')
        E = gaussian_matrix(n, m, 1.0 / math.sqrt(n), rng)
        W = normalize_columns(dictionary.A + scheme.delta * E)
    elif scheme.kind == 'pca':
        if data is None:
            raise MissingData('PCA initialisation')
        Y = data.Y if isinstance(data, SampleBatch) else np.asarray(data, dtype=np.float64)
        W, converged = top_singular_vectors(Y.T, m)
        if not converged:
            logger.warning("PCA initialisation uses an unconverged subspace")
    elif scheme.kind == 'random':
        W = normalize_columns(gaussian_matrix(n, m, 1.0 / math.sqrt(n), rng))
    else:
        raise InvalidTrainConfig('init', f"unknown scheme {scheme.kind!r}")

    return AutoencoderParams(W, bias_rule.initial(m), activation)


def descent_step(params: AutoencoderParams, g: GradientEstimate, zeta: float) -> AutoencoderParams:
    """W <- normalize(W - zeta G); the bias is left to bias_step."""
    return params.with_weights(normalize_columns(params.W - zeta * g.G))


def bias_step(b: np.ndarray, rule: BiasRule) -> np.ndarray:
    if rule.kind == 'zero':
        return np.zeros_like(b)
    if rule.kind == 'geometric':
        return b / rule.C
    return math.sqrt(1.0 - rule.tau) * b


def project_to_nearness(W: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Rescale W so that ||W|| <= 2||A||, then re-normalise its columns."""
    bound = 2.0 * spectral_norm(A)
    norm = spectral_norm(W)
    if norm > bound:
        W = W * (bound / norm)
    return normalize_columns(W)


StepCallback = Callable[[int, AutoencoderParams, GradientEstimate], None]


def train(spec: ModelSpec, config: TrainConfig,
          dictionary: Optional[Dictionary] = None,
          data: Optional[SampleBatch] = None,
          callback: Optional[StepCallback] = None):
    """
    Normalised batch gradient descent with bias scheduling.

    Monte Carlo runs draw a fresh batch per iteration from the dictionary, or
    reuse `data` (or one batch drawn once) when fresh_batches is off. Oracle
    runs use the closed-form expected gradient and trace on a fixed batch.
    callback(s, params, g) sees the parameters and gradient of every step.
    Returns (params, TrainTrace) with T + 1 trace rows.
    """
    config.validate()
    root = Rng(config.seed)
    oracle = config.gradient_source.kind == 'oracle'

    if oracle and dictionary is None:
        raise MissingGroundTruth('oracle gradient')
    if dictionary is None and (data is None or config.fresh_batches):
        raise MissingGroundTruth('sampling fresh batches')

    def batch_for(s: int) -> SampleBatch:
        if oracle:
            return eval_batch
        if config.fresh_batches:
            return sample_batch(dictionary, spec, config.gradient_source.batch_size, root.child(STREAM_BATCH, s))
        return fixed_batch

    eval_batch = fixed_batch = data
    if oracle and eval_batch is None:
        eval_batch = sample_batch(dictionary, spec, config.eval_size, root.child(STREAM_EVAL))
    if not oracle and not config.fresh_batches and fixed_batch is None:
        fixed_batch = sample_batch(dictionary, spec, config.gradient_source.batch_size, root.child(STREAM_BATCH, 0))

    init_data = data
    if config.init.kind == 'pca' and init_data is None:
        init_data = sample_batch(dictionary, spec, config.gradient_source.batch_size or config.eval_size,
                                 root.child(STREAM_INIT, 1))
    params = init_weights(config.init, spec, root.child(STREAM_INIT), dictionary, init_data,
                          config.bias_rule, config.activation)

    if config.bias_rule.kind == 'zero' and config.activation.kind == Activation.RELU:
        logger.warning("ReLU with zero bias does not recover supports; expect inconsistent codes")

    logger.info(f"Training {spec.family.value} n={spec.n} m={spec.m} k={spec.k} "
                f"init={config.init} T={config.T} zeta={config.zeta:g} "
                f"gradient={config.gradient_source.kind}")

    trace = TrainTrace()
    previous_frob = math.nan
    for s in range(config.T + 1):
        batch = batch_for(s)
        loss = batch_loss(params, batch.Y)

        if dictionary is not None:
            delta, match = closeness(params.W, dictionary.A)
            frob = match.frobenius_sq
            rate = batch_consistency_rate(params, batch, spec.family)
        else:
            delta = frob = rate = math.nan
        contraction = frob / previous_frob if previous_frob > 0 else math.nan
        trace.record(s, loss, frob, delta, rate, float(np.max(np.abs(params.b))), contraction)
        logger.debug(f"s={s} loss={loss:.6g} frob_err={frob:.6g} delta={delta:.4g} consistency={rate:.4f}")
        previous_frob = frob

        if s == config.T:
            break

        if oracle:
            g = expected_gradient(params.W, params.b, dictionary.A, spec)
        else:
            g = batch_gradient(params, batch, shard_size=config.shard_size, workers=config.workers)
        if callback is not None:
            callback(s, params, g)

        params = descent_step(params, g, config.zeta)
        params = params.with_bias(bias_step(params.b, config.bias_rule))
        if config.project_nearness and dictionary is not None:
            params = params.with_weights(project_to_nearness(params.W, dictionary.A))

    logger.info(f"Finished after {config.T} iterations: loss={trace.column('loss')[-1]:.6g}")
    return params, trace
