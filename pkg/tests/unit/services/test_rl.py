from __future__ import annotations

import numpy as np
import pytest

from app.core.errors import InvalidArgumentError
from app.services.rl import RL_DOMAINS, rl_asym, rl_mdp, rl_pomdp, rl_train
from tests.factories import tiny_config


@pytest.mark.parametrize("method", sorted(RL_DOMAINS))
def test_baselines_read_their_declared_inputs(tiger_door_1, method: str) -> None:
    result = rl_train(tiger_door_1, tiny_config(method=method), np.random.default_rng(0))
    policy_domain, value_domain = RL_DOMAINS[method]

    assert result.policy.input_domain == policy_domain
    assert result.value.input_domain == value_domain
    expected_width = tiger_door_1.state_dim if policy_domain == "state" else tiger_door_1.obs_dim
    assert result.policy.in_dim == expected_width


def test_records_follow_the_evaluation_schedule(tiger_door_1) -> None:
    seen = []
    result = rl_pomdp(tiger_door_1, tiny_config(method="rl_mdp", iterations=3), np.random.default_rng(1), callback=seen.append)

    assert result.env_steps == 3 * 64
    assert [r.iteration for r in result.records] == [0, 1, 2]
    assert seen == result.records
    assert all(r.method == "rl_pomdp" and r.beta == 0.0 for r in result.records)
    assert [r.env_steps_total for r in result.records] == [64, 128, 192]
    assert all(r.trpo_accepted is not None and r.value_loss is not None for r in result.records)


def test_wrappers_pin_the_method(tiger_door_1) -> None:
    cfg = tiny_config(method="rl_pomdp", iterations=1)

    assert rl_mdp(tiger_door_1, cfg, np.random.default_rng(0)).records[0].method == "rl_mdp"
    assert rl_asym(tiger_door_1, cfg, np.random.default_rng(0)).value.input_domain == "state"


def test_same_seed_same_policy(tiger_door_1) -> None:
    cfg = tiny_config(method="rl_asym", iterations=1)
    first = rl_train(tiger_door_1, cfg, np.random.default_rng(5))
    second = rl_train(tiger_door_1, cfg, np.random.default_rng(5))

    assert np.array_equal(first.policy.get_flat(), second.policy.get_flat())


def test_non_rl_methods_are_rejected(tiger_door_1) -> None:
    with pytest.raises(InvalidArgumentError):
        rl_train(tiger_door_1, tiny_config(method="a2d"), np.random.default_rng(0))
