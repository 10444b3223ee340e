from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
import torch

from app.core.errors import DimensionError, InvalidArgumentError
from app.core.numerics import LOG_PROB_FLOOR, categorical_kl, floored_log
from app.domains.envpair.belief import belief_dim
from app.domains.envpair.models import ProcessPair, TrajectoryBatch
from app.domains.envpair.sampling import ActionSource, parallel_rollout
from app.domains.training.schemas import MetricsRecord, RunConfig
from app.ml.nets import DTYPE, CategoricalPolicyNet, seed_from
from app.ml.optim import adam_step, make_adam
from app.observability.metrics import buffer_kl as buffer_kl_gauge
from app.observability.metrics import env_steps_total, iterations_total
from app.observability.tracing import span
from app.services.evaluation import EvaluationTracker, evaluate

logger = logging.getLogger(__name__)


class ReplayBuffer:
    """FIFO store of (state vector, belief vector, expert action distribution) rows."""

    def __init__(self, capacity: int, *, state_dim: int, belief_width: int, num_actions: int) -> None:
        if capacity < 1:
            raise InvalidArgumentError("buffer_capacity", "buffer capacity must be positive")
        self.capacity = capacity
        self.state_vecs = np.zeros((0, state_dim))
        self.belief_vecs = np.zeros((0, belief_width))
        self.expert_probs = np.zeros((0, num_actions))
        self.inserted = 0

    def __len__(self) -> int:
        return int(self.expert_probs.shape[0])

    @property
    def evicted(self) -> int:
        return self.inserted - len(self)

    def extend(self, state_vecs: np.ndarray, belief_vecs: np.ndarray, expert_probs: np.ndarray) -> None:
        rows = expert_probs.shape[0]
        if state_vecs.shape[0] != rows or belief_vecs.shape[0] != rows:
            raise DimensionError("buffer_rows", "buffer columns differ in length")
        # Copies, so later expert updates cannot reach stored rows.
        self.state_vecs = np.concatenate([self.state_vecs, np.array(state_vecs, dtype=float)])[-self.capacity :]
        self.belief_vecs = np.concatenate([self.belief_vecs, np.array(belief_vecs, dtype=float)])[-self.capacity :]
        self.expert_probs = np.concatenate([self.expert_probs, np.array(expert_probs, dtype=float)])[-self.capacity :]
        self.inserted += rows

    def to_dict(self) -> dict[str, object]:
        return {
            "capacity": self.capacity,
            "inserted": self.inserted,
            "state_vecs": self.state_vecs.tolist(),
            "belief_vecs": self.belief_vecs.tolist(),
            "expert_probs": self.expert_probs.tolist(),
        }

    @classmethod
    def from_dict(cls, payload: dict, *, state_dim: int, belief_width: int, num_actions: int) -> ReplayBuffer:
        buffer = cls(int(payload["capacity"]), state_dim=state_dim, belief_width=belief_width, num_actions=num_actions)
        buffer.state_vecs = np.array(payload["state_vecs"], dtype=float).reshape(-1, state_dim)
        buffer.belief_vecs = np.array(payload["belief_vecs"], dtype=float).reshape(-1, belief_width)
        buffer.expert_probs = np.array(payload["expert_probs"], dtype=float).reshape(-1, num_actions)
        buffer.inserted = int(payload["inserted"])
        return buffer


@dataclass(frozen=True)
class MixtureSchedule:
    beta0: float = 1.0
    mode: Literal["multiplicative", "immediate_zero"] = "multiplicative"
    decay: float = 0.8

    def __post_init__(self) -> None:
        if not 0.0 <= self.beta0 <= 1.0:
            raise InvalidArgumentError("beta_range", "beta0 must lie in [0, 1]")
        if not 0.0 < self.decay <= 1.0:
            raise InvalidArgumentError("beta_decay", "beta decay must lie in (0, 1]")

    def beta_at(self, iteration: int) -> float:
        if iteration <= 0:
            return self.beta0
        if self.mode == "immediate_zero":
            return 0.0
        return self.beta0 * self.decay**iteration


def mixture_probs(
    beta: float,
    expert: ActionSource,
    trainee: ActionSource,
    state_ids: np.ndarray,
    state_vecs: np.ndarray,
    belief_vecs: np.ndarray,
) -> np.ndarray:
    """Per-action mixture density beta * expert(a|s) + (1 - beta) * trainee(a|b)."""
    expert_p = expert.action_probs(state_ids, state_vecs, belief_vecs)
    trainee_p = trainee.action_probs(state_ids, state_vecs, belief_vecs)
    return beta * expert_p + (1.0 - beta) * trainee_p


@dataclass(frozen=True)
class MixtureBehavior:
    """Picks the expert with probability beta at every step; log-probs are mixture densities."""

    beta: float
    expert: ActionSource
    trainee: ActionSource

    def __post_init__(self) -> None:
        if not 0.0 <= self.beta <= 1.0:
            raise InvalidArgumentError("beta_range", "beta must lie in [0, 1]")

    def act(
        self, state_id: int, state_vec: np.ndarray, belief_vec: np.ndarray, rng: np.random.Generator
    ) -> tuple[int, float, bool]:
        ids, states, beliefs = np.array([state_id]), state_vec[None, :], belief_vec[None, :]
        expert_p = self.expert.action_probs(ids, states, beliefs)[0]
        trainee_p = self.trainee.action_probs(ids, states, beliefs)[0]
        expert_branch = self.beta >= 1.0 or (self.beta > 0.0 and rng.random() < self.beta)
        probs = expert_p if expert_branch else trainee_p
        action = int(rng.choice(probs.shape[0], p=probs))
        density = self.beta * expert_p[action] + (1.0 - self.beta) * trainee_p[action]
        return action, float(floored_log(density)), bool(expert_branch)


def mixture_sample(
    beta: float,
    expert: ActionSource,
    trainee: ActionSource,
    state_id: int,
    state_vec: np.ndarray,
    belief_vec: np.ndarray,
    rng: np.random.Generator,
) -> tuple[int, float, bool]:
    return MixtureBehavior(beta, expert, trainee).act(state_id, state_vec, belief_vec, rng)


def buffer_update(buffer: ReplayBuffer, batch: TrajectoryBatch, expert: ActionSource) -> ReplayBuffer:
    if len(batch) == 0:
        return buffer
    expert_probs = expert.action_probs(batch.state_ids, batch.state_vecs, batch.belief_vecs)
    buffer.extend(batch.state_vecs, batch.belief_vecs, expert_probs)
    return buffer


@dataclass(frozen=True)
class AilStepReport:
    losses: tuple[float, ...] = field(default=())
    rejected_steps: int = 0

    @property
    def final_loss(self) -> float | None:
        return self.losses[-1] if self.losses else None


def kl_to_expert(
    trainee: CategoricalPolicyNet, inputs: torch.Tensor, targets: torch.Tensor, target_log: torch.Tensor
) -> torch.Tensor:
    """Mean closed-form KL(expert row || trainee(.|b)) over the rows of ``inputs``."""
    return (targets * (target_log - trainee.log_probs(inputs))).sum(dim=1).mean()


def ail_step(
    buffer: ReplayBuffer,
    trainee: CategoricalPolicyNet,
    optimizer: torch.optim.Optimizer,
    *,
    rng: np.random.Generator,
    batch_size: int = 64,
    epochs: int = 2,
) -> AilStepReport:
    """Minimize the closed-form mean KL(stored expert row || trainee(.|b)) over the buffer.

    Returns the mean minibatch KL of every epoch.
    """
    if len(buffer) == 0:
        raise InvalidArgumentError("empty_buffer", "the replay buffer is empty")
    if batch_size < 1:
        raise InvalidArgumentError("ail_batch_size", "batch size must be positive")
    inputs = trainee.as_tensor(buffer.belief_vecs)
    targets = torch.as_tensor(buffer.expert_probs, dtype=DTYPE)
    target_log = torch.as_tensor(floored_log(buffer.expert_probs), dtype=DTYPE)
    size = len(buffer)
    losses: list[float] = []
    rejected = 0
    for _ in range(epochs):
        total = 0.0
        order = rng.permutation(size)
        for start in range(0, size, batch_size):
            index = torch.as_tensor(order[start : start + batch_size])
            optimizer.zero_grad()
            loss = kl_to_expert(trainee, inputs[index], targets[index], target_log[index])
            loss.backward()
            if not adam_step(optimizer).accepted:
                rejected += 1
            total += float(loss) * index.shape[0]
        losses.append(total / size)
    return AilStepReport(losses=tuple(losses), rejected_steps=rejected)


def buffer_kl(buffer: ReplayBuffer, trainee: CategoricalPolicyNet) -> float:
    """Mean KL(stored expert row || trainee) over the buffer."""
    if len(buffer) == 0:
        return 0.0
    trainee_probs = np.exp(trainee.distribution(buffer.belief_vecs).log_probs)
    kl = categorical_kl(buffer.expert_probs, np.maximum(trainee_probs, np.exp(LOG_PROB_FLOOR)))
    return max(float(kl.mean()), 0.0)


@dataclass
class AilResult:
    """The trainee as training left it, plus a copy at its best evaluation."""

    trainee: CategoricalPolicyNet
    buffer: ReplayBuffer
    records: list[MetricsRecord]
    best_deterministic_return: float | None
    best_trainee: CategoricalPolicyNet | None = None


def make_trainee(pair: ProcessPair, cfg: RunConfig, rng: np.random.Generator, belief_width: int) -> CategoricalPolicyNet:
    return CategoricalPolicyNet(
        belief_width,
        pair.num_actions,
        input_domain="belief",
        hidden=cfg.hidden,
        activation=cfg.activation,
        seed=seed_from(rng),
    )


def ail_train(
    pair: ProcessPair,
    expert: ActionSource,
    cfg: RunConfig,
    rng: np.random.Generator,
    *,
    callback: Callable[[MetricsRecord], None] | None = None,
) -> AilResult:
    """DAgger with a fixed full-state expert and a belief-conditioned trainee."""
    cfg = cfg.resolved()
    belief_width = belief_dim(pair.obs_dim, cfg.window, pair.num_actions)
    trainee = make_trainee(pair, cfg, rng, belief_width)
    optimizer = make_adam(trainee.parameters(), lr=cfg.trainee_lr, l2=cfg.l2)
    buffer = ReplayBuffer(
        cfg.buffer_capacity, state_dim=pair.state_dim, belief_width=belief_width, num_actions=pair.num_actions
    )
    schedule = MixtureSchedule(cfg.beta0, cfg.beta_schedule, cfg.beta_decay)
    tracker = EvaluationTracker.for_run(pair, cfg, nets={"trainee": trainee})
    records: list[MetricsRecord] = []
    env_steps = 0
    for iteration in range(cfg.iterations):
        with span("ail.iteration", iteration=iteration, env=cfg.env):
            beta = schedule.beta_at(iteration)
            batch = parallel_rollout(
                pair, MixtureBehavior(beta, expert, trainee), cfg.batch_size, rng, window=cfg.window, workers=cfg.workers
            )
            env_steps += len(batch)
            env_steps_total.labels(method=cfg.method).inc(len(batch))
            buffer_update(buffer, batch, expert)
            ail_step(buffer, trainee, optimizer, rng=rng, batch_size=cfg.ail_batch_size, epochs=cfg.ail_epochs)
            divergence = buffer_kl(buffer, trainee)
            buffer_kl_gauge.labels(method=cfg.method, env=cfg.env).set(divergence)
            iterations_total.labels(method=cfg.method).inc()
        record = MetricsRecord(
            method=cfg.method,
            env=cfg.env,
            seed=cfg.seed,
            iteration=iteration,
            env_steps_total=env_steps,
            beta=beta,
            buffer_kl=divergence,
        )
        if not tracker.due(iteration, cfg.iterations):
            continue
        result = evaluate(trainee, pair, cfg.eval_interactions, rng, window=cfg.window)
        record = record.model_copy(update=result.record_fields())
        records.append(record)
        if callback is not None:
            callback(record)
        if tracker.observe(iteration, result.deterministic_return):
            logger.info("AIL on %s stopped early at iteration %s", cfg.env, iteration)
            break
    return AilResult(
        trainee=trainee,
        buffer=buffer,
        records=records,
        best_deterministic_return=tracker.best_return,
        best_trainee=tracker.best_copy("trainee"),
    )
