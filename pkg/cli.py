#!/usr/bin/env python
"""
GEGA CLI - Root-level entry point.

This wrapper allows running the CLI from the project root directory:
    uv run cli.py synth --seed 7
    uv run cli.py train-teacher --train-file runs/synth/train.json
    uv run cli.py eval --pred runs/latest/result.json --gold runs/synth/dev.json

The actual CLI implementation is in source/cli_app.py.
"""
import sys
from pathlib import Path

# Add source directory to Python path for imports
source_dir = Path(__file__).parent / "source"
if str(source_dir) not in sys.path:
    sys.path.insert(0, str(source_dir))

# Import and run the CLI app
from cli_app import app

if __name__ == "__main__":
    app()
