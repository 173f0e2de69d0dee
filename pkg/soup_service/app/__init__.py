"""
Entry point for the sparse soup package.

This module exposes `run_cli` so the command line can be driven from
`python -m app` or from other entry scripts.
"""
from .main import run_cli

__all__ = ["run_cli"]
