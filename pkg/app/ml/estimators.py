from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from app.core.errors import DimensionError, InvalidArgumentError
from app.core.numerics import LOG_PROB_FLOOR, require_finite
from app.domains.envpair.models import TrajectoryBatch
from app.ml.nets import CategoricalPolicyNet
from app.observability.metrics import importance_weight_floor_hits_total

logger = logging.getLogger(__name__)

NORMALIZE_EPS = 1e-8


@dataclass(frozen=True, eq=False)
class AdvantageBatch:
    advantages: np.ndarray
    value_targets: np.ndarray

    def __post_init__(self) -> None:
        if self.value_targets.shape[0] != self.advantages.shape[0]:
            raise DimensionError("advantage_batch", "value_targets length differs from the advantages")
        require_finite("advantages", self.advantages)
        require_finite("value_targets", self.value_targets)

    def __len__(self) -> int:
        return int(self.advantages.shape[0])


@dataclass(frozen=True)
class MixtureValue:
    beta: float
    expert_value: np.ndarray
    trainee_value: np.ndarray

    def evaluate(self) -> np.ndarray:
        return self.beta * self.expert_value + (1.0 - self.beta) * self.trainee_value


def mixture_values(beta: float, expert_values: np.ndarray, trainee_values: np.ndarray) -> np.ndarray:
    if not 0.0 <= beta <= 1.0:
        raise InvalidArgumentError("beta_range", "beta must lie in [0, 1]")
    return MixtureValue(beta, np.asarray(expert_values, float), np.asarray(trainee_values, float)).evaluate()


def _check_length(batch: TrajectoryBatch, values: np.ndarray, name: str) -> np.ndarray:
    values = np.asarray(values, dtype=float).reshape(-1)
    if values.shape[0] != len(batch):
        raise DimensionError(f"{name}_length", f"{name} has {values.shape[0]} entries for {len(batch)} steps")
    return values


def discounted_returns(
    batch: TrajectoryBatch, gamma: float, *, bootstrap: np.ndarray | None = None
) -> np.ndarray:
    """Reward-to-go within each episode.

    Terminal steps end the sum; truncated steps add ``gamma * bootstrap`` (the
    value estimate of their next state, zero when not given).
    """
    tail_values = np.zeros(len(batch)) if bootstrap is None else _check_length(batch, bootstrap, "bootstrap")
    returns = np.zeros(len(batch))
    for i in reversed(range(len(batch))):
        if batch.dones[i]:
            tail = 0.0
        elif batch.truncated[i]:
            tail = tail_values[i]
        else:
            tail = returns[i + 1]
        returns[i] = batch.rewards[i] + gamma * tail
    return returns


def gae(
    batch: TrajectoryBatch,
    values: np.ndarray,
    next_values: np.ndarray,
    gamma: float,
    lam: float,
) -> AdvantageBatch:
    """Generalized advantage estimates with reward-to-go style value targets (advantage + value)."""
    if not 0.0 <= lam <= 1.0:
        raise InvalidArgumentError("gae_lambda", f"lambda must lie in [0, 1], got {lam}")
    values = _check_length(batch, values, "values")
    next_values = _check_length(batch, next_values, "next_values")
    next_values = np.where(batch.dones, 0.0, next_values)
    deltas = batch.rewards + gamma * next_values - values
    advantages = np.zeros(len(batch))
    running = 0.0
    for i in reversed(range(len(batch))):
        if batch.episode_ends[i]:
            running = 0.0
        running = deltas[i] + gamma * lam * running
        advantages[i] = running
    return AdvantageBatch(
        advantages=advantages,
        value_targets=advantages + values,
    )


def importance_weights(
    target_logp: np.ndarray, behavior_logp: np.ndarray, *, cap: float | None = None
) -> np.ndarray:
    """exp(target - behavior) per step, optionally capped at ``cap``."""
    target_logp = np.asarray(target_logp, dtype=float)
    behavior_logp = np.asarray(behavior_logp, dtype=float)
    if target_logp.shape != behavior_logp.shape:
        raise DimensionError("logp_shape", "target and behavior log-probs differ in shape")
    floor_hits = int(np.count_nonzero(behavior_logp <= LOG_PROB_FLOOR))
    if floor_hits:
        importance_weight_floor_hits_total.inc(floor_hits)
        logger.warning("%s behavior log-probs sit at the %.0f floor", floor_hits, LOG_PROB_FLOOR)
    weights = np.exp(target_logp - behavior_logp)
    if cap is not None:
        weights = np.minimum(weights, cap)
    return weights


def shape_with_entropy(
    advantages: np.ndarray,
    policy: CategoricalPolicyNet,
    inputs: np.ndarray,
    actions: np.ndarray,
    alpha: float,
) -> np.ndarray:
    """Add the per-sample entropy bonus ``-alpha * log pi(a_t | x_t)`` to each advantage."""
    if alpha < 0:
        raise InvalidArgumentError("entropy_coef", "entropy coefficient must be non-negative")
    advantages = np.asarray(advantages, dtype=float)
    if alpha == 0 or advantages.size == 0:
        return advantages.copy()
    log_probs = policy.distribution(inputs).log_probs
    taken = log_probs[np.arange(advantages.shape[0]), np.asarray(actions, dtype=int)]
    return advantages - alpha * taken


def normalize_advantages(advantages: np.ndarray, *, enabled: bool = True) -> np.ndarray:
    advantages = np.asarray(advantages, dtype=float)
    if not enabled:
        return advantages.copy()
    if advantages.size < 2:
        logger.warning("Advantage normalization skipped for a batch of %s", advantages.size)
        return advantages.copy()
    return (advantages - advantages.mean()) / (advantages.std() + NORMALIZE_EPS)
