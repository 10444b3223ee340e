"""Experiment configuration and emitted training records."""
