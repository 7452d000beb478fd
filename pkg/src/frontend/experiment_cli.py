import argparse
import io
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from dotenv import dotenv_values

# Add the project root to the Python path
sys.path.append(str(Path(__file__).parent.parent.parent))

from src.config import configure_logging, config as env_config
from src.encoder import Activation, InvalidActivation, recovery_params
from src.frontend.components.visualizations import TraceVisualizations
from src.generative import (
    Dictionary,
    Family,
    InvalidModelSpec,
    ModelSpec,
    delta_close_weights,
    sample_batch,
    sample_dictionary,
)
from src.gradient import expected_gradient
from src.metrics import (
    ClaimReport,
    combine_reports,
    consistency_rate,
    correlation_margin,
    hungarian_match,
    reports_to_frame,
    verify_claim_bounds,
)
from src.tensor_core import (
    STREAM_CODES,
    STREAM_DICTIONARY,
    STREAM_EVAL,
    DynamicsError,
    Rng,
    read_matrix,
    write_matrix,
)
from src.trainer import (
    BiasRule,
    GradientSource,
    InitScheme,
    InvalidTrainConfig,
    TrainConfig,
    TrainTrace,
    default_learning_rate,
    train,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_VERIFY = 3

# Stream used to derive one seed per reproduction grid cell
STREAM_GRID = 8

CONSISTENCY_THRESHOLD = 0.999
CORRELATION_TOL = 1e-10


class ConfigError(DynamicsError):
    """Raised for malformed experiment configuration files or arguments"""
    def __init__(self, field: str, line: Optional[int], message: str):
        self.field = field
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{field}: {message}")


def _parse_bool(value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ('true', '1', 'yes'):
        return True
    if lowered in ('false', '0', 'no'):
        return False
    raise ValueError(f"expected true/false, got {value!r}")


def _parse_optional_float(value: str) -> Optional[float]:
    return None if value.strip().lower() == 'auto' else float(value)


def _parse_floats(value: str) -> Tuple[float, ...]:
    return tuple(float(v) for v in value.split(',') if v.strip())


def _parse_names(value: str) -> Tuple[str, ...]:
    return tuple(v.strip() for v in value.split(',') if v.strip())


def _format(value) -> str:
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if value is None:
        return 'auto'
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ','.join(_format(v) for v in value)
    return str(value)


@dataclass(frozen=True)
class ExperimentConfig:
    # model
    family: str = 'gmm'
    n: int = 784
    m: int = 10
    k: int = 1
    a1: float = 1.0
    a2: float = 1.0
    magnitude_law: str = 'rademacher'
    sigma_eta: float = 0.01
    orthonormal: bool = False
    # train
    zeta: Optional[float] = None
    T: int = 50
    bias_rule: str = 'geometric'
    bias_C: float = 2.0
    bias_b0: float = -1.25
    bias_tau: float = 0.5
    activation: str = 'relu'
    threshold: float = 0.5
    gradient: str = 'mc'
    batch_size: int = 10_000
    fresh_batches: bool = True
    project_nearness: bool = False
    init: str = 'perturbed'
    init_delta: float = 0.5
    # experiment
    N_samples: int = 10_000
    noise_levels: Tuple[float, ...] = (0.01, 0.02, 0.03)
    inits: Tuple[str, ...] = ('perturbed', 'pca', 'random')
    out: str = 'results'
    seed: int = 0
    # verify
    verify_n: int = 256
    verify_delta: float = 0.05
    verify_samples: int = 10_000
    verify_instances: int = 100

    def validate(self) -> 'ExperimentConfig':
        checks = [
            ('model.family', self.family in {f.value for f in Family}, "must be gmm, sparse or nonneg"),
            ('train.bias_rule', self.bias_rule in ('zero', 'geometric', 'sqrt_contraction'),
             "must be zero, geometric or sqrt_contraction"),
            ('train.activation', self.activation in (Activation.RELU, Activation.THRESHOLD),
             "must be relu or threshold"),
            ('train.gradient', self.gradient in ('mc', 'oracle'), "must be mc or oracle"),
            ('train.init', self.init in ('perturbed', 'pca', 'random'), "must be perturbed, pca or random"),
            ('experiment.inits', all(i in ('perturbed', 'pca', 'random') for i in self.inits),
             "entries must be perturbed, pca or random"),
            ('experiment.noise_levels', len(self.noise_levels) > 0 and all(s >= 0 for s in self.noise_levels),
             "must be a non-empty list of non-negative floats"),
            ('experiment.seed', self.seed >= 0, "must be non-negative"),
            ('train.T', self.T >= 0, "must be non-negative"),
        ]
        for key, ok, message in checks:
            if not ok:
                raise ConfigError(key, None, message)
        return self

    def to_text(self) -> str:
        lines = []
        for key, (attr, _) in CONFIG_KEYS.items():
            lines.append(f"{key} = {_format(getattr(self, attr))}")
        return '\n'.join(lines) + '\n'

    @classmethod
    def from_text(cls, text: str, base: Optional['ExperimentConfig'] = None) -> 'ExperimentConfig':
        """Parse `section.key = value` lines; unknown keys and bad values raise ConfigError."""
        line_of: Dict[str, int] = {}
        for number, raw in enumerate(text.splitlines(), start=1):
            stripped = raw.strip()
            if not stripped or stripped.startswith('#'):
                continue
            if '=' not in stripped:
                raise ConfigError(stripped.split()[0], number, "expected 'key = value'")
            key = stripped.split('=', 1)[0].strip()
            if key in line_of:
                raise ConfigError(key, number, f"duplicate key (first set on line {line_of[key]})")
            line_of[key] = number

        values = dotenv_values(stream=io.StringIO(text), interpolate=False)
        updates = {}
        for key, value in values.items():
            if key not in CONFIG_KEYS:
                raise ConfigError(key, line_of.get(key), "unknown key")
            attr, parser = CONFIG_KEYS[key]
            try:
                updates[attr] = parser(value if value is not None else '')
            except ValueError as e:
                raise ConfigError(key, line_of.get(key), f"bad value {value!r} ({e})")

        return replace(base or cls(), **updates).validate()

    @classmethod
    def load(cls, path: Path, base: Optional['ExperimentConfig'] = None) -> 'ExperimentConfig':
        return cls.from_text(Path(path).read_text(), base)

    def model_spec(self, sigma_eta: Optional[float] = None, family: Optional[str] = None) -> ModelSpec:
        family = Family(family or self.family)
        sigma = self.sigma_eta if sigma_eta is None else sigma_eta
        if family is Family.GMM:
            return ModelSpec.gmm(self.n, self.m, sigma)
        if family is Family.SPARSE:
            return ModelSpec.sparse_coding(self.n, self.m, self.k, sigma, self.a1, self.magnitude_law)
        return ModelSpec.nonneg_sparse(self.n, self.m, self.k, self.a1, self.a2, sigma)

    def train_config(self, spec: ModelSpec, init: Optional[str] = None, seed: Optional[int] = None,
                     workers: int = 1, shard_size: Optional[int] = None) -> TrainConfig:
        init = init or self.init
        if self.bias_rule == 'zero':
            bias = BiasRule.zero()
        elif self.bias_rule == 'geometric':
            bias = BiasRule.geometric(self.bias_C, self.bias_b0)
        else:
            bias = BiasRule.sqrt_contraction(self.bias_tau, self.bias_b0)

        scheme = {'perturbed': InitScheme.perturbed(self.init_delta),
                  'pca': InitScheme.pca(),
                  'random': InitScheme.random()}[init]
        activation = Activation.relu() if self.activation == Activation.RELU else Activation.threshold(self.threshold)
        source = GradientSource.oracle() if self.gradient == 'oracle' else GradientSource.monte_carlo(self.batch_size)

        return TrainConfig(
            zeta=self.zeta if self.zeta is not None else default_learning_rate(spec),
            T=self.T,
            bias_rule=bias,
            init=scheme,
            gradient_source=source,
            activation=activation,
            seed=self.seed if seed is None else seed,
            project_nearness=self.project_nearness,
            fresh_batches=self.fresh_batches,
            workers=workers,
            shard_size=shard_size or env_config.SHARD_SIZE,
        ).validate()


CONFIG_KEYS = {
    'model.family': ('family', str.strip),
    'model.n': ('n', int),
    'model.m': ('m', int),
    'model.k': ('k', int),
    'model.a1': ('a1', float),
    'model.a2': ('a2', float),
    'model.magnitude_law': ('magnitude_law', str.strip),
    'model.sigma_eta': ('sigma_eta', float),
    'model.orthonormal': ('orthonormal', _parse_bool),
    'train.zeta': ('zeta', _parse_optional_float),
    'train.T': ('T', int),
    'train.bias_rule': ('bias_rule', str.strip),
    'train.bias_C': ('bias_C', float),
    'train.bias_b0': ('bias_b0', float),
    'train.bias_tau': ('bias_tau', float),
    'train.activation': ('activation', str.strip),
    'train.threshold': ('threshold', float),
    'train.gradient': ('gradient', str.strip),
    'train.batch_size': ('batch_size', int),
    'train.fresh_batches': ('fresh_batches', _parse_bool),
    'train.project_nearness': ('project_nearness', _parse_bool),
    'train.init': ('init', str.strip),
    'train.init_delta': ('init_delta', float),
    'experiment.N_samples': ('N_samples', int),
    'experiment.noise_levels': ('noise_levels', _parse_floats),
    'experiment.inits': ('inits', _parse_names),
    'experiment.out': ('out', str.strip),
    'experiment.seed': ('seed', int),
    'verify.n': ('verify_n', int),
    'verify.delta': ('verify_delta', float),
    'verify.samples': ('verify_samples', int),
    'verify.instances': ('verify_instances', int),
}


def derive_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=key).generate_state(1, dtype=np.uint32)[0])


def _dictionary(cfg: ExperimentConfig, spec: ModelSpec) -> Dictionary:
    return sample_dictionary(spec, Rng(cfg.seed, STREAM_DICTIONARY), orthonormal=cfg.orthonormal)


def run_generate(cfg: ExperimentConfig, out: Path) -> None:
    spec = cfg.model_spec()
    dictionary = _dictionary(cfg, spec)
    batch = sample_batch(dictionary, spec, cfg.N_samples, Rng(cfg.seed, STREAM_CODES))
    dictionary.save(out / 'dictionary.mat')
    write_matrix(out / 'data.mat', batch.Y)
    write_matrix(out / 'codes.mat', batch.X)
    logger.info(f"Wrote {spec.n}x{spec.m} dictionary (mu={dictionary.mu:.4f}) and {cfg.N_samples} samples to {out}")


def run_train(cfg: ExperimentConfig, out: Path, workers: int) -> TrainTrace:
    spec = cfg.model_spec()
    dictionary = _dictionary(cfg, spec)
    params, trace = train(spec, cfg.train_config(spec, workers=workers), dictionary=dictionary)
    dictionary.save(out / 'dictionary.mat')
    write_matrix(out / 'weights.mat', params.W)
    trace.to_csv(out / 'trace.csv')
    logger.info(f"Wrote trace and weights to {out}")
    return trace


@dataclass(frozen=True)
class GridCell:
    init: str
    sigma_eta: float
    spec: ModelSpec
    train_config: TrainConfig
    dictionary: Dictionary


def run_cell(cell: GridCell) -> pd.DataFrame:
    _, trace = train(cell.spec, cell.train_config, dictionary=cell.dictionary)
    return trace.frame


def run_grid(cfg: ExperimentConfig, noise_levels: Sequence[float], workers: int) -> Dict[Tuple[str, float], pd.DataFrame]:
    """Train every (init, noise level) cell; each cell's seed depends only on its grid position."""
    cells = []
    for i, init in enumerate(cfg.inits):
        for j, sigma in enumerate(noise_levels):
            spec = cfg.model_spec(sigma_eta=sigma)
            dictionary = _dictionary(cfg, spec)
            train_cfg = cfg.train_config(spec, init=init, seed=derive_seed(cfg.seed, STREAM_GRID, i, j))
            cells.append(GridCell(init, sigma, spec, train_cfg, dictionary))

    logger.info(f"Running {len(cells)} grid cells on {workers} worker(s)")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            frames = list(pool.map(run_cell, cells))
    else:
        frames = [run_cell(cell) for cell in cells]
    return {(cell.init, cell.sigma_eta): frame for cell, frame in zip(cells, frames)}


def reproduce_fig1(cfg: ExperimentConfig, out: Path, workers: int, svg: bool) -> List[Path]:
    traces = run_grid(cfg, cfg.noise_levels, workers)
    paths = []
    for (init, sigma), frame in traces.items():
        path = out / f"fig1_{init}_sigma{sigma:g}.csv"
        TrainTrace(frame).to_csv(path)
        paths.append(path)
        logger.info(f"fig1 {init} sigma={sigma:g}: final loss {frame['loss'].iloc[-1]:.4f}")
    if svg:
        TraceVisualizations.write_svg(TraceVisualizations.create_learning_curves(traces), out / 'fig1.svg')
    return paths


def reproduce_fig2(cfg: ExperimentConfig, out: Path, workers: int, svg: bool) -> pd.DataFrame:
    sigma = cfg.noise_levels[0]
    traces = run_grid(cfg, [sigma], workers)
    table = pd.DataFrame({'iter': np.arange(cfg.T + 1)})
    for init in ('perturbed', 'pca', 'random'):
        if (init, sigma) in traces:
            table[init] = traces[(init, sigma)]['frob_err'].to_numpy()
    table.to_csv(out / 'fig2_matching_error.csv', index=False, float_format='%.17g', na_rep='nan')

    final = table.iloc[-1]
    for other in ('pca', 'random'):
        if 'perturbed' in table and other in table and final[other] > 0:
            logger.info(f"fig2 final error ratio perturbed/{other}: {final['perturbed'] / final[other]:.4g}")
    if svg:
        TraceVisualizations.write_svg(TraceVisualizations.create_matching_error_chart(table), out / 'fig2.svg')
    return table


CONSISTENCY_CASES = [
    (Family.GMM, Activation.THRESHOLD),
    (Family.GMM, Activation.RELU),
    (Family.SPARSE, Activation.THRESHOLD),
    (Family.NONNEG, Activation.THRESHOLD),
    (Family.NONNEG, Activation.RELU),
]


def _verify_spec(family: Family, n: int, sigma: float, m_sparse: int = 50, k: int = 3) -> ModelSpec:
    if family is Family.GMM:
        return ModelSpec.gmm(n, 10, sigma)
    if family is Family.SPARSE:
        return ModelSpec.sparse_coding(n, m_sparse, k, sigma)
    return ModelSpec.nonneg_sparse(n, m_sparse, k, a1=0.95, a2=1.0, sigma_eta=sigma)


def verify_consistency(cfg: ExperimentConfig) -> pd.DataFrame:
    n, delta = cfg.verify_n, cfg.verify_delta
    rows = []
    for case, (family, activation) in enumerate(CONSISTENCY_CASES):
        spec = _verify_spec(family, n, 1.0 / math.sqrt(n))
        rng = Rng(cfg.seed, STREAM_EVAL).child(case)
        dictionary = sample_dictionary(spec, rng.child(0), orthonormal=True)
        W = delta_close_weights(dictionary.A, delta, rng.child(1))
        params = recovery_params(spec, W, delta, activation)
        rate = consistency_rate(dictionary, spec, params, cfg.verify_samples, rng.child(2))
        rows.append([family.value, activation, cfg.verify_samples, rate, rate >= CONSISTENCY_THRESHOLD])
        log = logger.info if rate >= CONSISTENCY_THRESHOLD else logger.warning
        log(f"consistency {family.value}/{activation}: {rate:.4f}")
    return pd.DataFrame(rows, columns=['family', 'activation', 'samples', 'rate', 'passed'])


def verify_claims(cfg: ExperimentConfig) -> List[ClaimReport]:
    spec = _verify_spec(Family.SPARSE, cfg.verify_n, 0.01)
    per_instance = max(cfg.verify_samples // max(cfg.verify_instances, 1), 1)
    reports = []
    for t in range(cfg.verify_instances):
        rng = Rng(cfg.seed, STREAM_EVAL).child(100, t)
        dictionary = sample_dictionary(spec, rng.child(0))
        W = delta_close_weights(dictionary.A, cfg.verify_delta, rng.child(1))
        batch = sample_batch(dictionary, spec, per_instance, rng.child(2))
        reports.extend(verify_claim_bounds(W, dictionary.A, batch, spec.sigma_eta))
    return combine_reports(reports)


def verify_correlation(cfg: ExperimentConfig) -> List[ClaimReport]:
    specs = {
        Family.GMM: ModelSpec.gmm(cfg.verify_n, 10),
        Family.SPARSE: ModelSpec.sparse_coding(32, 32, 2),
        Family.NONNEG: ModelSpec.nonneg_sparse(32, 32, 2, a1=0.5, a2=1.0),
    }
    reports = []
    for case, (family, spec) in enumerate(specs.items()):
        margins = []
        for t in range(cfg.verify_instances):
            rng = Rng(cfg.seed, STREAM_EVAL).child(200 + case, t)
            A = sample_dictionary(spec, rng.child(0), orthonormal=True).A
            delta = cfg.verify_delta if family is not Family.GMM else rng.child(1).generator.uniform(0.01, 0.1)
            W = delta_close_weights(A, delta, rng.child(2))
            b = np.zeros(spec.m)
            margins.append(correlation_margin(expected_gradient(W, b, A, spec), W, A, spec))
        margins = np.concatenate(margins)
        violations = int(np.sum(margins < -CORRELATION_TOL))
        reports.append(ClaimReport(f"correlation_{family.value}", len(margins), violations, float(margins.min())))
    return reports


def run_verify(cfg: ExperimentConfig, out: Path) -> bool:
    consistency = verify_consistency(cfg)
    claims = verify_claims(cfg)
    correlation = verify_correlation(cfg)

    consistency.to_csv(out / 'consistency.csv', index=False, float_format='%.17g')
    reports_to_frame(claims).to_csv(out / 'claims.csv', index=False, float_format='%.17g')
    reports_to_frame(correlation).to_csv(out / 'correlation.csv', index=False, float_format='%.17g')

    ok = (bool(consistency['passed'].all())
          and all(r.passed(0.01 if r.claim_id == 'noise_projection' else 0.0) for r in claims)
          and all(r.passed() for r in correlation))
    logger.info(f"Verification {'passed' if ok else 'found violations'}; reports in {out}")
    return ok


def run_match(w_path: Path, a_path: Path, out: Path, allow_sign_flip: bool) -> float:
    W, A = read_matrix(w_path), read_matrix(a_path)
    match = hungarian_match(W, A, allow_sign_flip)
    match.to_frame().to_csv(out / 'match.csv', index=False, float_format='%.17g')
    print(f"frobenius_sq={match.frobenius_sq!r}")
    return match.frobenius_sq


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError('arguments', None, message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog='autoencoder-dynamics',
                     description="Gradient descent dynamics of weight-sharing autoencoders on synthetic models.")
    parser.add_argument('--config', type=Path, help="experiment config file (section.key = value)")
    parser.add_argument('--seed', type=int, help="master seed (overrides experiment.seed)")
    parser.add_argument('--out', type=Path, help="output directory")
    parser.add_argument('--svg', action='store_true', help="also write SVG figures")
    parser.add_argument('--fresh-batches', type=_parse_bool, metavar='BOOL',
                        help="draw a fresh batch every iteration")
    parser.add_argument('--gradient', choices=['mc', 'oracle'])
    parser.add_argument('--family', choices=[f.value for f in Family])
    parser.add_argument('--log-level', default=None, help="DEBUG, INFO, WARNING, ...")
    parser.add_argument('--log-json', action='store_true', help="emit JSON log records")
    parser.add_argument('--workers', type=int, help="parallel shards / grid cells")

    sub = parser.add_subparsers(dest='command', required=True)
    sub.add_parser('generate', help="write a dictionary and a sampled dataset")
    sub.add_parser('train', help="one training run: trace CSV and weights")
    sub.add_parser('verify', help="consistency, bound and correlation checks")
    match = sub.add_parser('match', help="Hungarian matching of two weight files")
    match.add_argument('weights', type=Path)
    match.add_argument('reference', type=Path)
    match.add_argument('--no-sign-flip', action='store_true')
    reproduce = sub.add_parser('reproduce', help="learning-curve and matching-error grids")
    reproduce.add_argument('figure', choices=['fig1', 'fig2'])
    return parser


def _resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    base = ExperimentConfig(seed=env_config.DEFAULT_SEED, out=env_config.OUTPUT_DIR)
    cfg = ExperimentConfig.load(args.config, base) if args.config else base

    overrides = {}
    if args.seed is not None:
        overrides['seed'] = args.seed
    if args.out is not None:
        overrides['out'] = str(args.out)
    if args.fresh_batches is not None:
        overrides['fresh_batches'] = args.fresh_batches
    if args.gradient is not None:
        overrides['gradient'] = args.gradient
    if args.family is not None:
        overrides['family'] = args.family
    cfg = replace(cfg, **overrides).validate()

    try:
        cfg.train_config(cfg.model_spec())
    except (InvalidModelSpec, InvalidTrainConfig) as e:
        raise ConfigError(e.field, None, str(e))
    except InvalidActivation as e:
        raise ConfigError('train.threshold', None, str(e))
    return cfg


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        configure_logging(args.log_level or env_config.LOG_LEVEL, args.log_json or env_config.LOG_JSON)
        cfg = _resolve_config(args)
        workers = args.workers if args.workers is not None else env_config.WORKERS
        if workers < 1:
            raise ConfigError('--workers', None, "must be at least 1")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        if args.command == 'generate':
            run_generate(cfg, out)
        elif args.command == 'train':
            run_train(cfg, out, workers)
        elif args.command == 'verify':
            if not run_verify(cfg, out):
                print(f"verification found violations; see the reports in {out}", file=sys.stderr)
                return EXIT_VERIFY
        elif args.command == 'match':
            run_match(args.weights, args.reference, out, not args.no_sign_flip)
        elif args.figure == 'fig1':
            reproduce_fig1(cfg, out, workers, args.svg)
        else:
            reproduce_fig2(cfg, out, workers, args.svg)
    except (DynamicsError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(cli_main())


if __name__ == '__main__':
    main()
