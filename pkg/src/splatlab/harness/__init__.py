"""Experiment orchestration: config, training loop, evaluation, CLI."""
