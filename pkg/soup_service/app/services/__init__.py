"""Harness services: checkpoints, metrics, reporting and sweeps."""
