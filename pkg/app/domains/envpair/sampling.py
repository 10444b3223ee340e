from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import numpy as np

from app.core.errors import InvalidArgumentError
from app.core.numerics import floored_log
from app.domains.envpair.belief import BeliefWindow, belief_dim, belief_update, initial_belief
from app.domains.envpair.models import ProcessPair, StepOutcome, TrajectoryBatch, require_non_terminal

logger = logging.getLogger(__name__)


@runtime_checkable
class ActionSource(Protocol):
    """Anything mapping (state, belief) rows to action distributions."""

    def action_probs(self, state_ids: np.ndarray, state_vecs: np.ndarray, belief_vecs: np.ndarray) -> np.ndarray: ...


@runtime_checkable
class Behavior(Protocol):
    def act(
        self, state_id: int, state_vec: np.ndarray, belief_vec: np.ndarray, rng: np.random.Generator
    ) -> tuple[int, float, bool]: ...


@dataclass(frozen=True)
class SourceBehavior:
    source: ActionSource

    def act(
        self, state_id: int, state_vec: np.ndarray, belief_vec: np.ndarray, rng: np.random.Generator
    ) -> tuple[int, float, bool]:
        probs = self.source.action_probs(np.array([state_id]), state_vec[None, :], belief_vec[None, :])[0]
        action = int(rng.choice(probs.shape[0], p=probs))
        return action, float(floored_log(probs[action])), False


def as_behavior(policy: ActionSource | Behavior) -> Behavior:
    if isinstance(policy, Behavior):
        return policy
    return SourceBehavior(policy)


def step(pair: ProcessPair, s: int, a: int, rng: np.random.Generator) -> StepOutcome:
    require_non_terminal(pair, s)
    probs = pair.transitions[s, a]
    if probs.max() == 1.0:
        s_next = int(np.argmax(probs))
    else:
        s_next = int(rng.choice(pair.num_states, p=probs))
    return StepOutcome(
        s_next=s_next,
        o_next=pair.observe(s_next),
        r=pair.reward(s, a, s_next),
        done=pair.is_terminal(s_next),
    )


def sample_initial_state(pair: ProcessPair, rng: np.random.Generator) -> int:
    return int(rng.choice(pair.num_states, p=pair.init_dist))


def rollout(
    pair: ProcessPair,
    behavior: ActionSource | Behavior,
    n_steps: int,
    rng: np.random.Generator,
    *,
    window: int = 1,
) -> TrajectoryBatch:
    """Collect exactly ``n_steps`` interactions, restarting episodes as needed."""
    if n_steps < 0:
        raise InvalidArgumentError("n_steps", "n_steps must be non-negative")
    dim = belief_dim(pair.obs_dim, window, pair.num_actions)
    if n_steps == 0:
        return TrajectoryBatch.empty(pair.state_dim, dim)
    actor = as_behavior(behavior)

    state_ids = np.zeros(n_steps, dtype=int)
    next_state_ids = np.zeros(n_steps, dtype=int)
    belief_vecs = np.zeros((n_steps, dim))
    next_belief_vecs = np.zeros((n_steps, dim))
    actions = np.zeros(n_steps, dtype=int)
    rewards = np.zeros(n_steps)
    dones = np.zeros(n_steps, dtype=bool)
    truncated = np.zeros(n_steps, dtype=bool)
    behavior_logp = np.zeros(n_steps)
    expert_branch = np.zeros(n_steps, dtype=bool)
    episode_ids = np.zeros(n_steps, dtype=int)
    episode_returns: list[float] = []
    episode_lengths: list[int] = []

    episode = 0
    s = sample_initial_state(pair, rng)
    belief: BeliefWindow = initial_belief(pair.observe(s), window_size=window, num_actions=pair.num_actions)
    t, total = 0, 0.0
    for i in range(n_steps):
        a, logp, branch = actor.act(s, pair.state_vecs[s], belief.vec, rng)
        outcome = step(pair, s, a, rng)
        next_belief = belief_update(belief, outcome.o_next, a)
        state_ids[i], next_state_ids[i] = s, outcome.s_next
        belief_vecs[i], next_belief_vecs[i] = belief.vec, next_belief.vec
        actions[i], rewards[i], dones[i] = a, outcome.r, outcome.done
        behavior_logp[i], expert_branch[i], episode_ids[i] = logp, branch, episode
        t += 1
        total += outcome.r
        if outcome.done or t >= pair.horizon:
            truncated[i] = not outcome.done
            episode_returns.append(total)
            episode_lengths.append(t)
            episode += 1
            s = sample_initial_state(pair, rng)
            belief = initial_belief(pair.observe(s), window_size=window, num_actions=pair.num_actions)
            t, total = 0, 0.0
        else:
            s, belief = outcome.s_next, next_belief
    if not (dones[-1] or truncated[-1]):
        truncated[-1] = True

    return TrajectoryBatch(
        state_ids=state_ids,
        state_vecs=pair.state_vecs[state_ids],
        belief_vecs=belief_vecs,
        actions=actions,
        rewards=rewards,
        next_state_ids=next_state_ids,
        next_state_vecs=pair.state_vecs[next_state_ids],
        next_belief_vecs=next_belief_vecs,
        dones=dones,
        truncated=truncated,
        behavior_logp=behavior_logp,
        expert_branch=expert_branch,
        episode_ids=episode_ids,
        episode_returns=tuple(episode_returns),
        episode_lengths=tuple(episode_lengths),
    )


def parallel_rollout(
    pair: ProcessPair,
    behavior: ActionSource | Behavior,
    n_steps: int,
    rng: np.random.Generator,
    *,
    window: int = 1,
    workers: int = 1,
) -> TrajectoryBatch:
    """Split ``n_steps`` across workers with independent streams, merged in worker order."""
    if workers <= 1 or n_steps < workers:
        return rollout(pair, behavior, n_steps, rng, window=window)
    seeds = np.random.SeedSequence(int(rng.integers(2**63))).spawn(workers)
    shares = [n_steps // workers + (1 if i < n_steps % workers else 0) for i in range(workers)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [
            pool.submit(rollout, pair, behavior, share, np.random.default_rng(seed), window=window)
            for share, seed in zip(shares, seeds, strict=True)
        ]
        batches = [future.result() for future in futures]
    logger.debug("Merged %s rollout shards into %s steps", workers, n_steps)
    return TrajectoryBatch.concatenate(batches)
