from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from app.core.errors import DimensionError, InvalidArgumentError
from app.domains.oracle.models import TabularPolicy
from app.domains.oracle.solvers import optimal_mdp_policy
from app.ml.nets import CategoricalPolicyNet, flatten_grads
from app.ml.optim import make_adam
from app.services.evaluation import deterministic_return
from app.services.imitation import (
    MixtureSchedule,
    ReplayBuffer,
    ail_step,
    ail_train,
    buffer_kl,
    buffer_update,
    kl_to_expert,
    mixture_probs,
    mixture_sample,
)
from tests.factories import make_batch, tiny_config


def _constant_policy(rows: int, action: int) -> TabularPolicy:
    probs = np.zeros((rows, 4))
    probs[:, action] = 1.0
    return TabularPolicy(domain="state", probs=probs)


def _rows(count: int, offset: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    ids = np.arange(offset, offset + count, dtype=float)
    return ids[:, None], np.stack([ids, -ids], axis=1), np.full((count, 4), 0.25)


def test_buffer_is_fifo_with_fixed_capacity() -> None:
    buffer = ReplayBuffer(5000, state_dim=1, belief_width=2, num_actions=4)
    for chunk in range(3):
        buffer.extend(*_rows(2000, offset=2000 * chunk))

    assert len(buffer) == 5000
    assert buffer.inserted == 6000
    assert buffer.evicted == 1000
    assert buffer.state_vecs[0, 0] == 1000.0
    assert buffer.state_vecs[-1, 0] == 5999.0


def test_buffer_stores_copies() -> None:
    buffer = ReplayBuffer(10, state_dim=1, belief_width=2, num_actions=4)
    states, beliefs, probs = _rows(3)
    buffer.extend(states, beliefs, probs)
    probs[:] = 0.0
    states[:] = -1.0

    assert np.allclose(buffer.expert_probs, 0.25)
    assert buffer.state_vecs[:, 0].tolist() == [0.0, 1.0, 2.0]


def test_buffer_validation() -> None:
    with pytest.raises(InvalidArgumentError):
        ReplayBuffer(0, state_dim=1, belief_width=1, num_actions=4)
    buffer = ReplayBuffer(4, state_dim=1, belief_width=2, num_actions=4)
    states, beliefs, probs = _rows(3)
    with pytest.raises(DimensionError):
        buffer.extend(states[:2], beliefs, probs)


def test_buffer_round_trips_through_a_dict() -> None:
    buffer = ReplayBuffer(4, state_dim=1, belief_width=2, num_actions=4)
    buffer.extend(*_rows(6))
    restored = ReplayBuffer.from_dict(buffer.to_dict(), state_dim=1, belief_width=2, num_actions=4)

    assert restored.inserted == 6
    assert restored.evicted == 2
    assert np.array_equal(restored.belief_vecs, buffer.belief_vecs)
    assert np.array_equal(restored.expert_probs, buffer.expert_probs)


def test_multiplicative_schedule() -> None:
    schedule = MixtureSchedule(beta0=1.0, mode="multiplicative", decay=0.8)

    assert [schedule.beta_at(n) for n in range(3)] == pytest.approx([1.0, 0.8, 0.64])
    assert schedule.beta_at(10) == pytest.approx(0.8**10)


def test_immediate_zero_schedule() -> None:
    schedule = MixtureSchedule(beta0=0.7, mode="immediate_zero")

    assert schedule.beta_at(0) == 0.7
    assert schedule.beta_at(1) == 0.0
    assert schedule.beta_at(50) == 0.0


def test_schedule_rejects_out_of_range_values() -> None:
    with pytest.raises(InvalidArgumentError):
        MixtureSchedule(beta0=1.5)
    with pytest.raises(InvalidArgumentError):
        MixtureSchedule(decay=0.0)


@pytest.mark.parametrize(("beta", "expected_action", "expert_branch"), [(1.0, 0, True), (0.0, 1, False)])
def test_pure_mixtures_follow_one_policy(tiger_door_1, rng, beta: float, expected_action: int, expert_branch: bool) -> None:
    expert = _constant_policy(tiger_door_1.num_states, 0)
    trainee = _constant_policy(tiger_door_1.num_states, 1)
    for _ in range(20):
        action, logp, branch = mixture_sample(
            beta, expert, trainee, 0, tiger_door_1.state_vecs[0], np.zeros(3), rng
        )
        assert action == expected_action
        assert logp == pytest.approx(0.0)
        assert branch is expert_branch


def test_even_mixture_logs_the_mixture_density(tiger_door_1, rng) -> None:
    expert = _constant_policy(tiger_door_1.num_states, 0)
    trainee = _constant_policy(tiger_door_1.num_states, 1)
    draws = [
        mixture_sample(0.5, expert, trainee, 0, tiger_door_1.state_vecs[0], np.zeros(3), rng) for _ in range(4000)
    ]
    actions = np.array([d[0] for d in draws])

    assert set(actions.tolist()) == {0, 1}
    assert np.mean(actions == 0) == pytest.approx(0.5, abs=0.03)
    assert all(d[1] == pytest.approx(math.log(0.5)) for d in draws)
    assert all(d[2] == (d[0] == 0) for d in draws)


def test_mixture_probs_is_the_convex_combination(tiger_door_1) -> None:
    expert = _constant_policy(tiger_door_1.num_states, 0)
    trainee = TabularPolicy.uniform("state", tiger_door_1.num_states, 4)
    ids = np.array([0, 1])
    probs = mixture_probs(0.25, expert, trainee, ids, tiger_door_1.state_vecs[ids], np.zeros((2, 3)))

    assert probs[0] == pytest.approx([0.4375, 0.1875, 0.1875, 0.1875])
    assert np.allclose(probs.sum(axis=1), 1.0)


def test_buffer_update_labels_rows_with_the_expert() -> None:
    expert = TabularPolicy(domain="state", probs=np.array([[0.7, 0.1, 0.1, 0.1], [0.0, 0.0, 1.0, 0.0]]))
    batch = make_batch(np.zeros(3), [False, False, True])
    buffer = buffer_update(ReplayBuffer(10, state_dim=2, belief_width=2, num_actions=4), batch, expert)

    assert len(buffer) == 3
    assert np.allclose(buffer.expert_probs, expert.probs[[0, 1, 0]])
    assert buffer_update(buffer, make_batch(np.zeros(0), np.zeros(0, dtype=bool)), expert) is buffer
    assert len(buffer) == 3


def test_imitation_averages_conflicting_labels_for_one_belief(rng) -> None:
    buffer = ReplayBuffer(8, state_dim=1, belief_width=2, num_actions=4)
    buffer.extend(np.array([[0.0], [1.0]]), np.array([[1.0, 0.0], [1.0, 0.0]]), np.eye(4)[[0, 1]])
    trainee = CategoricalPolicyNet(2, 4, input_domain="belief", hidden=(8,), seed=0)
    optimizer = make_adam(trainee.parameters(), lr=0.05, l2=0.0)

    report = ail_step(buffer, trainee, optimizer, rng=rng, batch_size=2, epochs=400)

    assert len(report.losses) == 400
    assert report.rejected_steps == 0
    assert report.final_loss == pytest.approx(math.log(2), abs=0.02)
    probs = trainee.distribution(np.array([[1.0, 0.0]])).probs[0]
    assert probs == pytest.approx([0.5, 0.5, 0.0, 0.0], abs=0.02)


def test_imitation_preconditions(rng) -> None:
    trainee = CategoricalPolicyNet(2, 4, input_domain="belief", hidden=(4,), seed=0)
    optimizer = make_adam(trainee.parameters(), lr=0.01)
    buffer = ReplayBuffer(8, state_dim=1, belief_width=2, num_actions=4)
    with pytest.raises(InvalidArgumentError):
        ail_step(buffer, trainee, optimizer, rng=rng)

    buffer.extend(*_rows(2))
    before = trainee.get_flat()
    assert ail_step(buffer, trainee, optimizer, rng=rng, epochs=0).final_loss is None
    assert np.array_equal(trainee.get_flat(), before)


def test_buffer_kl_is_zero_only_when_the_trainee_matches(rng) -> None:
    trainee = CategoricalPolicyNet(2, 4, input_domain="belief", hidden=(4,), seed=3)
    beliefs = rng.normal(size=(5, 2))
    buffer = ReplayBuffer(8, state_dim=1, belief_width=2, num_actions=4)
    assert buffer_kl(buffer, trainee) == 0.0

    buffer.extend(np.zeros((5, 1)), beliefs, trainee.distribution(beliefs).probs)
    assert buffer_kl(buffer, trainee) == pytest.approx(0.0, abs=1e-10)

    other = ReplayBuffer(8, state_dim=1, belief_width=2, num_actions=4)
    other.extend(np.zeros((5, 1)), beliefs, np.eye(4)[[0, 1, 2, 3, 0]])
    assert buffer_kl(other, trainee) > 0.0


def test_closed_form_kl_gradient_matches_the_sampled_score(rng) -> None:
    trainee = CategoricalPolicyNet(3, 4, input_domain="belief", hidden=(5,), seed=2)
    beliefs = rng.normal(size=(6, 3))
    expert = rng.dirichlet(np.ones(4), size=6)
    params = list(trainee.parameters())
    loss = kl_to_expert(
        trainee, trainee.as_tensor(beliefs), torch.as_tensor(expert), torch.as_tensor(np.log(expert))
    )
    grad = flatten_grads(torch.autograd.grad(loss, params), params).numpy()

    scores = np.array([[trainee.grad_log_prob(beliefs[i : i + 1], a) for a in range(4)] for i in range(6)])
    expected = -np.einsum("ia,iap->p", expert, scores) / 6
    assert np.allclose(grad, expected, atol=1e-10)

    draws = 4000
    rows = rng.integers(6, size=draws)
    actions = (rng.random(draws)[:, None] > expert[rows].cumsum(axis=1)).sum(axis=1).clip(max=3)
    sampled = -scores[rows, actions].mean(axis=0)
    assert np.linalg.norm(sampled - grad) <= 0.1 * np.linalg.norm(grad) + 0.05


def test_ail_returns_the_final_trainee_and_a_separate_best_copy(tiger_door_1) -> None:
    cfg = tiny_config(method="ail", use_oracle_expert=True, iterations=3, eval_every=1)
    expert, _ = optimal_mdp_policy(tiger_door_1)
    result = ail_train(tiger_door_1, expert, cfg, np.random.default_rng(1))

    assert result.best_trainee is not None
    assert result.best_trainee is not result.trainee
    assert deterministic_return(result.trainee, tiger_door_1) == pytest.approx(result.records[-1].deterministic_return)
    assert deterministic_return(result.best_trainee, tiger_door_1) == pytest.approx(result.best_deterministic_return)
