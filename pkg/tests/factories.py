from __future__ import annotations

import numpy as np

from app.domains.envpair.layouts import build_tabular_pair
from app.domains.envpair.models import ProcessPair, TrajectoryBatch
from app.domains.training.schemas import RunConfig


def chain_pair(*, gamma: float = 0.5, horizon: int = 10) -> ProcessPair:
    """s0 -> s1 -> terminal under every action, reward 1 per move."""
    transitions = np.zeros((3, 2, 3))
    transitions[0, :, 1] = 1.0
    transitions[1, :, 2] = 1.0
    transitions[2, :, 2] = 1.0
    rewards = np.zeros((3, 2, 3))
    rewards[0, :, 1] = 1.0
    rewards[1, :, 2] = 1.0
    return build_tabular_pair(
        transitions=transitions,
        rewards=rewards,
        init_dist=np.array([1.0, 0.0, 0.0]),
        terminal=np.array([False, False, True]),
        obs_vecs=np.eye(3),
        gamma=gamma,
        horizon=horizon,
        name="chain",
    )


def aliased_pair(*, gamma: float = 0.9) -> ProcessPair:
    """Two equally likely start states sharing one observation.

    Action 0 pays +1 in s0 and -1 in s1; action 1 pays the reverse. Both end the episode.
    """
    transitions = np.zeros((3, 2, 3))
    transitions[:, :, 2] = 1.0
    rewards = np.zeros((3, 2, 3))
    rewards[0, 0, 2], rewards[0, 1, 2] = 1.0, -1.0
    rewards[1, 0, 2], rewards[1, 1, 2] = -1.0, 1.0
    obs = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 0.0]])
    return build_tabular_pair(
        transitions=transitions,
        rewards=rewards,
        init_dist=np.array([0.5, 0.5, 0.0]),
        terminal=np.array([False, False, True]),
        obs_vecs=obs,
        gamma=gamma,
        horizon=5,
        name="aliased",
    )


def random_tabular_pair(seed: int, *, num_states: int = 5, num_actions: int = 2, gamma: float = 0.9) -> ProcessPair:
    """Random pair with stochastic transitions, a terminal sink and partially shared observations."""
    gen = np.random.default_rng(seed)
    n = num_states + 1
    transitions = gen.dirichlet(np.ones(n), size=(n, num_actions))
    transitions[-1] = 0.0
    transitions[-1, :, -1] = 1.0
    rewards = gen.normal(size=(n, num_actions, n))
    rewards[-1] = 0.0
    init = np.zeros(n)
    init[: num_states // 2 + 1] = 1.0
    init /= init.sum()
    obs = np.zeros((n, 3))
    for s in range(num_states):
        obs[s, s % 3] = 1.0
    terminal = np.zeros(n, dtype=bool)
    terminal[-1] = True
    return build_tabular_pair(
        transitions=transitions,
        rewards=rewards,
        init_dist=init,
        terminal=terminal,
        obs_vecs=obs,
        gamma=gamma,
        horizon=50,
        name=f"random-{seed}",
    )


def make_batch(
    rewards,
    dones,
    *,
    truncated=None,
    actions=None,
    state_dim: int = 2,
    belief_dim: int = 2,
    behavior_logp=None,
) -> TrajectoryBatch:
    """Hand-built batch; states and beliefs are one-hot on the step index modulo their width."""
    rewards = np.asarray(rewards, dtype=float)
    size = rewards.shape[0]
    index = np.arange(size)
    states = np.eye(state_dim)[index % state_dim]
    beliefs = np.eye(belief_dim)[index % belief_dim]
    dones = np.asarray(dones, dtype=bool)
    truncated = np.zeros(size, dtype=bool) if truncated is None else np.asarray(truncated, dtype=bool)
    ends = dones | truncated
    episode_ids = np.concatenate([[0], np.cumsum(ends)[:-1]]).astype(int) if size else np.zeros(0, dtype=int)
    return TrajectoryBatch(
        state_ids=index % state_dim,
        state_vecs=states,
        belief_vecs=beliefs,
        actions=np.zeros(size, dtype=int) if actions is None else np.asarray(actions, dtype=int),
        rewards=rewards,
        next_state_ids=(index + 1) % state_dim,
        next_state_vecs=np.roll(states, -1, axis=0),
        next_belief_vecs=np.roll(beliefs, -1, axis=0),
        dones=dones,
        truncated=truncated,
        behavior_logp=np.zeros(size) if behavior_logp is None else np.asarray(behavior_logp, dtype=float),
        expert_branch=np.zeros(size, dtype=bool),
        episode_ids=episode_ids,
    )


def tiny_config(method: str = "a2d", env: str = "tiger_door_1", **updates) -> RunConfig:
    """Run config small enough for unit tests: short rollouts, one narrow layer, no early stopping."""
    payload = {
        "method": method,
        "env": env,
        "batch_size": 64,
        "buffer_capacity": 256,
        "hidden": (8,),
        "value_epochs": 1,
        "value_minibatches": 2,
        "ail_batch_size": 32,
        "ail_epochs": 1,
        "iterations": 2,
        "eval_every": 1,
        "eval_interactions": 50,
        "early_stop_evals": 0,
        "workers": 1,
        **updates,
    }
    return RunConfig(**payload)
