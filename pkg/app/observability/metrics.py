from __future__ import annotations

from contextlib import contextmanager
from pathlib import Path
from time import perf_counter

from prometheus_client import REGISTRY, Counter, Gauge, Histogram, write_to_textfile

env_steps_total = Counter(
    "a2d_lab_env_steps_total",
    "Environment interactions collected for training.",
    ["method"],
)

iterations_total = Counter(
    "a2d_lab_iterations_total",
    "Completed training iterations.",
    ["method"],
)

iteration_duration_seconds = Histogram(
    "a2d_lab_iteration_duration_seconds",
    "Wall time of one training iteration.",
    ["method"],
    buckets=(0.05, 0.1, 0.25, 0.5, 1, 2, 5, 10, 30, 60),
)

trpo_steps_total = Counter(
    "a2d_lab_trpo_steps_total",
    "Trust-region step outcomes.",
    ["result"],
)

optimizer_rejected_steps_total = Counter(
    "a2d_lab_optimizer_rejected_steps_total",
    "Adam steps rejected because of non-finite gradients.",
)

importance_weight_floor_hits_total = Counter(
    "a2d_lab_importance_weight_floor_hits_total",
    "Behavior log-probabilities at or below the log-prob floor.",
)

oracle_solves_total = Counter(
    "a2d_lab_oracle_solves_total",
    "Exact tabular oracle computations.",
    ["operation"],
)

oracle_solve_duration_seconds = Histogram(
    "a2d_lab_oracle_solve_duration_seconds",
    "Duration of exact oracle computations.",
    ["operation"],
    buckets=(0.001, 0.01, 0.05, 0.1, 0.5, 1, 5, 20),
)

deterministic_return = Gauge(
    "a2d_lab_deterministic_return",
    "Latest deterministic evaluation return.",
    ["method", "env"],
)

buffer_kl = Gauge(
    "a2d_lab_buffer_kl",
    "Latest mean KL between stored expert rows and the trainee.",
    ["method", "env"],
)


@contextmanager
def observe_duration(metric: Histogram):
    start = perf_counter()
    try:
        yield
    finally:
        metric.observe(max(perf_counter() - start, 0))


@contextmanager
def observe_oracle(operation: str):
    start = perf_counter()
    try:
        yield
    finally:
        oracle_solve_duration_seconds.labels(operation=operation).observe(max(perf_counter() - start, 0))
        oracle_solves_total.labels(operation=operation).inc()


def dump_textfile(path: str | Path) -> None:
    """Write the default registry in text exposition format."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    write_to_textfile(str(target), REGISTRY)
