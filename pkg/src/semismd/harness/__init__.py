"""Experiment plumbing: configuration, training, evaluation, gradient checks and the CLI."""
