from __future__ import annotations

import numpy as np
import pytest

from app.core.errors import DimensionError, PreconditionError
from app.domains.envpair.belief import belief_dim, belief_update, initial_belief
from app.domains.envpair.sampling import parallel_rollout, rollout, step
from app.domains.oracle.models import TabularPolicy
from app.domains.oracle.solvers import optimal_mdp_policy


def _uniform(pair) -> TabularPolicy:
    return TabularPolicy.uniform("state", pair.num_states, pair.num_actions)


def test_belief_window_shifts_observations_and_actions() -> None:
    b0 = initial_belief(np.array([1.0, 0.0]), window_size=2, num_actions=3)
    b1 = belief_update(b0, np.array([0.0, 1.0]), 2)

    assert belief_dim(2, 2, 3) == 7
    assert np.array_equal(b0.vec, [0, 0, 1, 0, 0, 0, 0])
    assert np.array_equal(b1.vec, [1, 0, 0, 1, 0, 0, 1])


def test_belief_update_rejects_bad_shapes() -> None:
    b0 = initial_belief(np.zeros(3))
    with pytest.raises(DimensionError):
        belief_update(b0, np.zeros(4), 0)
    with pytest.raises(DimensionError):
        belief_update(b0, np.zeros(3), 7)


def test_window_one_belief_is_the_observation(frozen_lake) -> None:
    s = int(frozen_lake.initial_states[0])
    b = initial_belief(frozen_lake.observe(s))

    assert np.array_equal(b.vec, frozen_lake.observe(s))


def test_step_from_terminal_is_a_precondition_error(frozen_lake, rng) -> None:
    with pytest.raises(PreconditionError):
        step(frozen_lake, frozen_lake.num_states - 1, 0, rng)


def test_rollout_collects_exact_step_count(frozen_lake, rng) -> None:
    batch = rollout(frozen_lake, _uniform(frozen_lake), 500, rng)

    assert len(batch) == 500
    assert batch.episode_ends[-1]
    assert batch.belief_vecs.shape == (500, 25)
    assert batch.state_vecs.shape == (500, 34)
    assert np.allclose(batch.behavior_logp, np.log(0.25))


def test_episode_returns_match_reward_sums(tiger_door_0, rng) -> None:
    batch = rollout(tiger_door_0, _uniform(tiger_door_0), 3000, rng)
    completed = len(batch.episode_returns)
    sums = [batch.rewards[batch.episode_ids == episode].sum() for episode in range(completed)]

    assert completed > 0
    assert np.allclose(sums, batch.episode_returns)


def test_optimal_expert_rollout_earns_the_mdp_return(frozen_lake, rng) -> None:
    expert, value = optimal_mdp_policy(frozen_lake)
    batch = rollout(frozen_lake, expert, 2000, rng)

    assert np.mean(batch.episode_returns) == pytest.approx(value, abs=1.0)
    assert set(np.round(batch.episode_returns, 6)) <= {8.0, 10.0, 12.0}


def test_rollout_is_deterministic_for_a_seed(frozen_lake) -> None:
    first = rollout(frozen_lake, _uniform(frozen_lake), 300, np.random.default_rng(7))
    second = rollout(frozen_lake, _uniform(frozen_lake), 300, np.random.default_rng(7))

    assert np.array_equal(first.actions, second.actions)
    assert np.array_equal(first.state_ids, second.state_ids)


def test_parallel_rollout_merges_shards_in_worker_order(frozen_lake) -> None:
    merged = parallel_rollout(frozen_lake, _uniform(frozen_lake), 1001, np.random.default_rng(3), workers=4)
    again = parallel_rollout(frozen_lake, _uniform(frozen_lake), 1001, np.random.default_rng(3), workers=4)

    assert len(merged) == 1001
    assert np.array_equal(merged.actions, again.actions)
    assert np.all(np.diff(merged.episode_ids) >= 0)


def test_zero_step_rollout_is_empty(frozen_lake, rng) -> None:
    batch = rollout(frozen_lake, _uniform(frozen_lake), 0, rng)

    assert len(batch) == 0
    assert batch.belief_vecs.shape == (0, 25)
