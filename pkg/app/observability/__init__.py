"""Prometheus counters and optional OpenTelemetry spans for training runs."""
