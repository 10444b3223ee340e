from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from app.core.errors import InvalidArgumentError
from app.ml.nets import CategoricalPolicyNet, QNet, ValueNet
from app.ml.trpo import (
    PolicyBatch,
    TrustRegionConfig,
    categorical_kl_tensor,
    conjugate_gradient,
    fit_q,
    fit_value,
    mean_kl,
    surrogate_loss,
    trpo_step,
)
from tests.factories import make_batch

H = 1e-5


def _current_logp(policy: CategoricalPolicyNet, inputs: np.ndarray, actions: np.ndarray) -> np.ndarray:
    log_probs = policy.distribution(inputs).log_probs
    return log_probs[np.arange(actions.shape[0]), actions]


def _random_batch(policy: CategoricalPolicyNet, seed: int, size: int = 12) -> PolicyBatch:
    gen = np.random.default_rng(seed)
    inputs = gen.normal(size=(size, policy.in_dim))
    actions = gen.integers(policy.num_actions, size=size)
    return PolicyBatch(
        inputs=inputs,
        actions=actions,
        advantages=gen.normal(size=size),
        old_logp=_current_logp(policy, inputs, actions) + gen.normal(scale=0.1, size=size),
    )


def test_surrogate_at_the_sampling_policy_is_the_mean_advantage() -> None:
    policy = CategoricalPolicyNet(3, 4, hidden=(5,), seed=1)
    batch = _random_batch(policy, 0)
    batch = PolicyBatch(batch.inputs, batch.actions, batch.advantages, _current_logp(policy, batch.inputs, batch.actions))

    value, _ = surrogate_loss(policy, batch)
    assert value == pytest.approx(batch.advantages.mean())


def test_zero_advantages_give_a_zero_surrogate_and_no_step() -> None:
    policy = CategoricalPolicyNet(3, 4, hidden=(5,), seed=1)
    batch = _random_batch(policy, 1)
    batch = PolicyBatch(batch.inputs, batch.actions, np.zeros(len(batch)), batch.old_logp)
    before = policy.get_flat()

    value, grad = surrogate_loss(policy, batch)
    report = trpo_step(policy, batch)

    assert value == 0.0
    assert np.all(grad == 0)
    assert report.status == "zero_gradient"
    assert np.array_equal(policy.get_flat(), before)


@pytest.mark.parametrize("seed", range(3))
def test_surrogate_gradient_matches_finite_differences(seed: int) -> None:
    policy = CategoricalPolicyNet(3, 4, hidden=(5,), seed=seed)
    batch = _random_batch(policy, seed)
    _, analytic = surrogate_loss(policy, batch)

    flat = policy.get_flat()
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        up, down = flat.copy(), flat.copy()
        up[i] += H
        down[i] -= H
        policy.set_flat(up)
        f_up = surrogate_loss(policy, batch)[0]
        policy.set_flat(down)
        numeric[i] = (f_up - surrogate_loss(policy, batch)[0]) / (2 * H)
    policy.set_flat(flat)

    assert np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric) < 1e-4


def test_kl_fixture_against_a_skewed_distribution() -> None:
    old = torch.log(torch.full((1, 4), 0.25, dtype=torch.float64))
    new = torch.log(torch.tensor([[0.7, 0.1, 0.1, 0.1]], dtype=torch.float64))

    assert float(categorical_kl_tensor(old, new)[0]) == pytest.approx(0.4298131946103268, rel=1e-12)


def test_mean_kl_is_zero_for_identical_policies_and_positive_otherwise(rng) -> None:
    inputs = rng.normal(size=(6, 3))
    first = CategoricalPolicyNet(3, 4, hidden=(5,), seed=0)
    second = CategoricalPolicyNet(3, 4, hidden=(5,), seed=0)
    other = CategoricalPolicyNet(3, 4, hidden=(5,), seed=1)

    assert mean_kl(first, second, inputs) == 0.0
    assert mean_kl(first, other, inputs) > 0.0


def test_conjugate_gradient_solves_a_spd_system() -> None:
    matrix = torch.tensor([[4.0, 1.0], [1.0, 3.0]], dtype=torch.float64)
    b = torch.tensor([1.0, 2.0], dtype=torch.float64)
    x, solved = conjugate_gradient(lambda v: matrix @ v, b, iters=10)

    assert solved
    assert torch.allclose(matrix @ x, b, atol=1e-8)


def test_conjugate_gradient_flags_negative_curvature() -> None:
    _, solved = conjugate_gradient(lambda v: -v, torch.ones(2, dtype=torch.float64), iters=5)

    assert not solved


def test_bandit_steps_move_towards_the_better_action() -> None:
    policy = CategoricalPolicyNet(1, 2, hidden=(4,), seed=0)
    inputs = np.ones((40, 1))
    actions = np.tile([0, 1], 20)
    advantages = np.where(actions == 0, 1.0, -1.0)
    cfg = TrustRegionConfig(max_kl=0.01)
    history = [policy.distribution(inputs[:1]).probs[0, 0]]
    for _ in range(8):
        batch = PolicyBatch(inputs, actions, advantages, _current_logp(policy, inputs, actions))
        report = trpo_step(policy, batch, cfg)
        assert report.accepted
        assert report.kl <= cfg.max_kl + 1e-6
        assert report.improvement > 0
        history.append(policy.distribution(inputs[:1]).probs[0, 0])

    assert all(later > earlier for earlier, later in zip(history, history[1:], strict=False))
    assert history[-1] > 0.6


def test_trust_region_rejects_empty_batches() -> None:
    policy = CategoricalPolicyNet(1, 2, hidden=(4,))
    empty = PolicyBatch(np.zeros((0, 1)), np.zeros(0, dtype=int), np.zeros(0), np.zeros(0))
    with pytest.raises(InvalidArgumentError):
        trpo_step(policy, empty)


def test_fit_value_on_zero_rewards_goes_to_zero(rng) -> None:
    batch = make_batch(np.zeros(64), np.arange(64) % 4 == 3, state_dim=4)
    net = ValueNet(4, hidden=(8,), seed=0)
    losses = fit_value(net, batch, 0.9, rng=rng, lr=1e-2, epochs=60, minibatches=8, l2=0.0)

    assert np.all(np.isfinite(losses))
    assert np.abs(net.predict(batch.state_vecs)).max() < 0.05


def test_fit_q_learns_a_one_step_reward(rng) -> None:
    batch = make_batch(np.full(32, 5.0), np.ones(32, dtype=bool), actions=np.arange(32) % 2, belief_dim=3)
    net = QNet(3, 2, hidden=(8,), seed=0)
    losses = fit_q(net, batch, 0.9, rng=rng, lr=1e-2, epochs=200, minibatches=4, l2=0.0)

    assert losses[-1] < losses[0]
    predictions = net.predict(batch.belief_vecs, batch.actions)
    assert np.abs(predictions - 5.0).max() < 0.25
    assert math.isfinite(losses[-1])


def test_fitting_needs_data(rng) -> None:
    empty = make_batch(np.zeros(0), np.zeros(0, dtype=bool))
    with pytest.raises(InvalidArgumentError):
        fit_value(ValueNet(2), empty, 0.9, rng=rng)
    with pytest.raises(InvalidArgumentError):
        fit_q(QNet(2, 2), empty, 0.9, rng=rng)


def test_entropy_bonus_adds_the_scaled_mean_entropy_and_its_gradient() -> None:
    policy = CategoricalPolicyNet(3, 4, hidden=(5,), seed=2)
    batch = _random_batch(policy, 7)

    plain, plain_grad = surrogate_loss(policy, batch)
    bonus, bonus_grad = surrogate_loss(policy, batch, entropy_coef=0.5)
    entropy, entropy_grad = policy.entropy(batch.inputs)

    assert bonus == pytest.approx(plain + 0.5 * entropy)
    assert bonus_grad == pytest.approx(plain_grad + 0.5 * entropy_grad)


def test_an_entropy_only_step_spreads_the_policy() -> None:
    policy = CategoricalPolicyNet(3, 4, hidden=(5,), seed=3)
    batch = _random_batch(policy, 8)
    batch = PolicyBatch(batch.inputs, batch.actions, np.zeros(len(batch)), batch.old_logp)
    before, _ = policy.entropy(batch.inputs)

    report = trpo_step(policy, batch, entropy_coef=1.0)

    assert report.accepted
    assert policy.entropy(batch.inputs)[0] > before
