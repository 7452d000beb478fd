import json
import logging
import os

import pytest

from src.config import Config, configure_logging


@pytest.fixture
def test_environment():
    """Setup test environment variables"""
    os.environ['AED_WORKERS'] = '3'
    os.environ['AED_SHARD_SIZE'] = '512'
    os.environ['AED_LOG_JSON'] = 'true'
    yield
    # Clean up
    del os.environ['AED_WORKERS']
    del os.environ['AED_SHARD_SIZE']
    del os.environ['AED_LOG_JSON']


def test_config_defaults():
    cfg = Config()
    assert cfg.OUTPUT_DIR
    assert cfg.WORKERS >= 1
    assert cfg.SHARD_SIZE >= 1


def test_config_reads_environment(test_environment):
    cfg = Config()
    assert cfg.WORKERS == 3
    assert cfg.SHARD_SIZE == 512
    assert cfg.LOG_JSON is True


def test_config_rejects_zero_workers(monkeypatch):
    monkeypatch.setenv('AED_WORKERS', '0')
    with pytest.raises(ValueError):
        Config()


def test_json_logging(capsys):
    configure_logging('DEBUG', json_format=True)
    logging.getLogger('src.trainer').debug("step done")

    record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert record['message'] == "step done"
    assert record['levelname'] == 'DEBUG'
    assert record['name'] == 'src.trainer'

    configure_logging('INFO')
