import os
import sys

# Add the current directory to Python path
sys.path.insert(0, os.path.dirname(__file__))

from src.frontend.experiment_cli import cli_main

if __name__ == "__main__":
    sys.exit(cli_main())
