import logging
import os
import sys
from typing import Optional

from dotenv import load_dotenv
from pythonjsonlogger import jsonlogger


class Config:
    def __init__(self):
        load_dotenv()

        # Logging Configuration
        self.LOG_LEVEL = self._get_env('AED_LOG_LEVEL', 'INFO')
        self.LOG_JSON = self._get_env('AED_LOG_JSON', 'False').lower() == 'true'

        # Output Configuration
        self.OUTPUT_DIR = self._get_env('AED_OUTPUT_DIR', 'results')

        # Execution Configuration
        self.WORKERS = int(self._get_env('AED_WORKERS', '1'))
        self.SHARD_SIZE = int(self._get_env('AED_SHARD_SIZE', '2048'))
        self.DEFAULT_SEED = int(self._get_env('AED_DEFAULT_SEED', '0'))

        if self.WORKERS < 1:
            raise ValueError("AED_WORKERS must be at least 1")
        if self.SHARD_SIZE < 1:
            raise ValueError("AED_SHARD_SIZE must be at least 1")

    def _get_env(self, key: str, default: Optional[str] = None) -> str:
        """Get environment variable with validation."""
        value = os.getenv(key, default)
        if value is None:
            raise ValueError(f"Environment variable {key} is not set")
        return value


def configure_logging(level: str = 'INFO', json_format: bool = False) -> None:
    """Install a single stream handler on the root logger."""
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)

    handler = logging.StreamHandler(sys.stderr)
    if json_format:
        formatter = jsonlogger.JsonFormatter('%(asctime)s %(levelname)s %(name)s %(message)s')
    else:
        formatter = logging.Formatter('%(asctime)s %(levelname)s %(name)s: %(message)s')
    handler.setFormatter(formatter)
    root.addHandler(handler)
    root.setLevel(level.upper())


config = Config()
