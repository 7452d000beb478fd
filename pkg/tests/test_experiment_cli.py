from dataclasses import fields
from unittest.mock import patch

import numpy as np
import pandas as pd
import pytest

from src.frontend.experiment_cli import (
    CONFIG_KEYS,
    EXIT_CONFIG,
    EXIT_OK,
    EXIT_RUNTIME,
    EXIT_VERIFY,
    ConfigError,
    ExperimentConfig,
    cli_main,
    derive_seed,
)
from src.generative import Dictionary, Family
from src.metrics import ClaimReport
from src.tensor_core import Rng, normalize_columns as normalize, read_matrix, write_matrix
from src.trainer import TRACE_COLUMNS, GradientSource, InitScheme


TINY = """\
# small enough to train in well under a second
model.family = gmm
model.n = 32
model.m = 4
model.sigma_eta = 0.01
train.T = 3
train.batch_size = 200
experiment.N_samples = 50
experiment.noise_levels = 0.01,0.02
experiment.inits = perturbed,random
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return path


def _run(config_path, out, *command):
    return cli_main(['--config', str(config_path), '--out', str(out), *command])


def test_config_text_round_trip():
    cfg = ExperimentConfig(family='nonneg', k=3, a1=0.5, zeta=2.5, noise_levels=(0.01, 0.05), seed=7)
    assert ExperimentConfig.from_text(cfg.to_text()) == cfg


def test_config_keys_cover_every_field():
    assert {attr for attr, _ in CONFIG_KEYS.values()} == {f.name for f in fields(ExperimentConfig)}


def test_config_defaults_and_overrides():
    cfg = ExperimentConfig.from_text("train.zeta = auto\ntrain.fresh_batches = false\n")

    assert cfg.zeta is None
    assert cfg.fresh_batches is False
    assert cfg.n == 784 and cfg.m == 10


def test_unknown_key_reports_line():
    with pytest.raises(ConfigError) as e:
        ExperimentConfig.from_text("model.n = 16\n\nmodel.depth = 3\n")
    assert e.value.field == 'model.depth'
    assert e.value.line == 3


@pytest.mark.parametrize("text,field", [
    ("model.n = sixteen\n", 'model.n'),
    ("model.orthonormal = maybe\n", 'model.orthonormal'),
    ("model.family = mixture\n", 'model.family'),
    ("train.init = spectral\n", 'train.init'),
    ("experiment.seed = -1\n", 'experiment.seed'),
    ("model.n = 16\nmodel.n = 32\n", 'model.n'),
])
def test_bad_config_values(text, field):
    with pytest.raises(ConfigError) as e:
        ExperimentConfig.from_text(text)
    assert e.value.field == field


def test_train_config_from_experiment():
    cfg = ExperimentConfig.from_text(TINY)
    spec = cfg.model_spec()
    train_cfg = cfg.train_config(spec, init='random', seed=11)

    assert spec.family is Family.GMM and (spec.n, spec.m) == (32, 4)
    assert train_cfg.zeta == 4.0
    assert train_cfg.init == InitScheme.random()
    assert train_cfg.gradient_source == GradientSource.monte_carlo(200)
    assert train_cfg.seed == 11


def test_derive_seed():
    assert derive_seed(0, 8, 1, 2) == derive_seed(0, 8, 1, 2)
    assert derive_seed(0, 8, 1, 2) != derive_seed(0, 8, 2, 1)
    assert derive_seed(0, 8, 1, 2) != derive_seed(1, 8, 1, 2)


def test_cli_rejects_bad_arguments(tmp_path):
    assert cli_main(['--out', str(tmp_path), 'explode']) == EXIT_CONFIG
    assert cli_main(['--out', str(tmp_path), '--workers', '0', 'train']) == EXIT_CONFIG


def test_cli_rejects_bad_config(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("train.activation = threshold\ntrain.threshold = -1\n")
    assert _run(path, tmp_path, 'train') == EXIT_CONFIG

    path.write_text("model.family = sparse\nmodel.k = 20\n")
    assert _run(path, tmp_path, 'train') == EXIT_CONFIG


def test_match_missing_file_is_runtime_error(tmp_path):
    assert cli_main(['--out', str(tmp_path), 'match',
                     str(tmp_path / "missing.mat"), str(tmp_path / "also_missing.mat")]) == EXIT_RUNTIME


def test_match_identical_files(tmp_path):
    A = normalize(Rng(5).generator.standard_normal((12, 4)))
    write_matrix(tmp_path / "w.mat", -A[:, ::-1])
    write_matrix(tmp_path / "a.mat", A)

    code = cli_main(['--out', str(tmp_path), 'match', str(tmp_path / "w.mat"), str(tmp_path / "a.mat")])

    match = pd.read_csv(tmp_path / "match.csv")
    assert code == EXIT_OK
    assert list(match.columns) == ['a_column', 'w_column', 'sign', 'distance', 'frobenius_sq']
    assert match['w_column'].tolist() == [3, 2, 1, 0]
    assert np.allclose(match['frobenius_sq'], 0.0, atol=1e-24)


def test_generate_writes_dictionary_and_data(tiny_config, tmp_path):
    out = tmp_path / "gen"
    assert _run(tiny_config, out, 'generate') == EXIT_OK

    dictionary = Dictionary.load(out / "dictionary.mat")
    Y = read_matrix(out / "data.mat")
    X = read_matrix(out / "codes.mat")

    assert dictionary.A.shape == (32, 4)
    assert Y.shape == (50, 32) and X.shape == (50, 4)
    assert np.all(np.count_nonzero(X, axis=1) == 1)


def test_train_is_reproducible(tiny_config, tmp_path):
    """Same seed and config give byte-identical traces; a new seed changes them"""
    for name in ('a', 'b'):
        assert _run(tiny_config, tmp_path / name, 'train') == EXIT_OK
    assert cli_main(['--config', str(tiny_config), '--out', str(tmp_path / 'c'), '--seed', '9', 'train']) == EXIT_OK

    first = (tmp_path / 'a' / "trace.csv").read_bytes()
    assert first == (tmp_path / 'b' / "trace.csv").read_bytes()
    assert first != (tmp_path / 'c' / "trace.csv").read_bytes()

    trace = pd.read_csv(tmp_path / 'a' / "trace.csv")
    assert list(trace.columns) == list(TRACE_COLUMNS)
    assert len(trace) == 4
    assert read_matrix(tmp_path / 'a' / "weights.mat").shape == (32, 4)


def test_train_with_sharded_workers_matches_serial(tiny_config, tmp_path):
    assert _run(tiny_config, tmp_path / 'serial', 'train') == EXIT_OK
    assert cli_main(['--config', str(tiny_config), '--out', str(tmp_path / 'sharded'),
                     '--workers', '2', 'train']) == EXIT_OK

    assert (tmp_path / 'serial' / "trace.csv").read_bytes() == (tmp_path / 'sharded' / "trace.csv").read_bytes()


def test_verify_writes_reports(tmp_path):
    path = tmp_path / "verify.cfg"
    path.write_text("verify.n = 256\nverify.samples = 300\nverify.instances = 3\n")

    code = _run(path, tmp_path, 'verify')

    consistency = pd.read_csv(tmp_path / "consistency.csv")
    correlation = pd.read_csv(tmp_path / "correlation.csv")
    claims = pd.read_csv(tmp_path / "claims.csv")

    noise = claims['claim_id'] == 'noise_projection'
    clean = (consistency['passed'].all()
             and (correlation['violations'] == 0).all()
             and (claims.loc[~noise, 'violations'] == 0).all()
             and (claims.loc[noise, 'violations'] <= 0.01 * claims.loc[noise, 'instances']).all())
    assert code == (EXIT_OK if clean else EXIT_VERIFY)

    assert len(consistency) == 5
    assert set(consistency['family']) == {'gmm', 'sparse', 'nonneg'}
    assert consistency['rate'].between(0.0, 1.0).all()
    assert correlation['claim_id'].tolist() == ['correlation_gmm', 'correlation_sparse', 'correlation_nonneg']
    assert correlation.loc[0, "violations"] == 0
    assert len(claims) > 0


def test_reproduce_fig1_grid(tiny_config, tmp_path):
    assert _run(tiny_config, tmp_path, 'reproduce', 'fig1') == EXIT_OK

    written = sorted(p.name for p in tmp_path.glob("fig1_*.csv"))
    assert written == ['fig1_perturbed_sigma0.01.csv', 'fig1_perturbed_sigma0.02.csv',
                       'fig1_random_sigma0.01.csv', 'fig1_random_sigma0.02.csv']
    for name in written:
        assert len(pd.read_csv(tmp_path / name)) == 4


def test_reproduce_fig2_table(tiny_config, tmp_path):
    path = tmp_path / "fig2.cfg"
    path.write_text(TINY.replace("perturbed,random", "perturbed,pca,random"))

    assert _run(path, tmp_path, 'reproduce', 'fig2') == EXIT_OK

    table = pd.read_csv(tmp_path / "fig2_matching_error.csv")
    assert list(table.columns) == ['iter', 'perturbed', 'pca', 'random']
    assert table['iter'].tolist() == [0, 1, 2, 3]
    assert (table[['perturbed', 'pca', 'random']] >= 0).all().all()


def _passing_consistency():
    return pd.DataFrame([['gmm', 'relu', 10, 1.0, True]], columns=['family', 'activation', 'samples', 'rate', 'passed'])


@patch("src.frontend.experiment_cli.verify_claims", return_value=[ClaimReport('own_alignment', 10, 0, 0.1)])
@patch("src.frontend.experiment_cli.verify_consistency", side_effect=lambda cfg: _passing_consistency())
def test_verify_exit_code_follows_reports(mock_consistency, mock_claims, tmp_path):
    """Violations still write every report but exit with a distinct code"""
    passing = [ClaimReport('correlation_gmm', 10, 0, 0.0)]
    failing = [ClaimReport('correlation_gmm', 10, 2, -0.5)]

    with patch("src.frontend.experiment_cli.verify_correlation", return_value=passing):
        assert cli_main(['--out', str(tmp_path / 'ok'), 'verify']) == EXIT_OK
    with patch("src.frontend.experiment_cli.verify_correlation", return_value=failing):
        assert cli_main(['--out', str(tmp_path / 'bad'), 'verify']) == EXIT_VERIFY

    report = pd.read_csv(tmp_path / 'bad' / "correlation.csv")
    assert report.loc[0, 'violations'] == 2
    assert (tmp_path / 'bad' / "consistency.csv").exists()
