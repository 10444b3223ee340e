from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from app.core.errors import DimensionError, InvalidArgumentError, NonFiniteError
from app.ml.nets import CategoricalPolicyNet, QNet, ValueNet, net_from_architecture

H = 1e-5


def _policy(seed: int = 0) -> CategoricalPolicyNet:
    return CategoricalPolicyNet(3, 4, hidden=(5,), seed=seed)


def _log_prob(net: CategoricalPolicyNet, x: np.ndarray, action: int) -> float:
    with torch.no_grad():
        return float(net.log_probs(net.as_tensor(x))[0, action])


def _numeric_grad(net, fn) -> np.ndarray:
    flat = net.get_flat()
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        up, down = flat.copy(), flat.copy()
        up[i] += H
        down[i] -= H
        net.set_flat(up)
        f_up = fn()
        net.set_flat(down)
        f_down = fn()
        grad[i] = (f_up - f_down) / (2 * H)
    net.set_flat(flat)
    return grad


def test_zero_parameters_give_a_uniform_policy() -> None:
    net = _policy()
    net.set_flat(np.zeros(net.num_params))
    out = net.distribution(np.ones((2, 3)))

    assert np.allclose(out.probs, 0.25)
    assert np.allclose(out.log_probs, math.log(0.25))


def test_probabilities_are_normalized(rng) -> None:
    net = _policy(seed=3)
    probs = net.distribution(rng.normal(size=(10, 3))).probs

    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-9)


def test_inputs_are_validated() -> None:
    net = _policy()
    with pytest.raises(DimensionError):
        net.distribution(np.zeros((1, 4)))
    with pytest.raises(NonFiniteError):
        net.distribution(np.array([[0.0, np.nan, 1.0]]))
    with pytest.raises(InvalidArgumentError):
        net.grad_log_prob(np.zeros(3), 4)


def test_score_function_identity(rng) -> None:
    net = _policy(seed=1)
    x = rng.normal(size=3)
    probs = net.distribution(x).probs[0]
    total = sum(probs[a] * net.grad_log_prob(x, a) for a in range(4))

    assert np.abs(total).max() < 1e-8


@pytest.mark.parametrize("seed", range(5))
def test_grad_log_prob_matches_finite_differences(seed: int) -> None:
    gen = np.random.default_rng(seed)
    net = _policy(seed=seed)
    x = gen.normal(size=3)
    action = int(gen.integers(4))

    analytic = net.grad_log_prob(x, action)
    numeric = _numeric_grad(net, lambda: _log_prob(net, x, action))

    assert np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric) < 1e-4


def test_entropy_of_uniform_policy_and_its_gradient(rng) -> None:
    net = _policy(seed=2)
    x = rng.normal(size=(4, 3))

    value, analytic = net.entropy(x)
    numeric = _numeric_grad(net, lambda: net.entropy(x)[0])
    assert np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric) < 1e-4

    net.set_flat(np.zeros(net.num_params))
    assert net.entropy(x)[0] == pytest.approx(math.log(4))
    assert value <= math.log(4)


def test_same_seed_same_parameters() -> None:
    assert np.array_equal(_policy(seed=9).get_flat(), _policy(seed=9).get_flat())
    assert not np.array_equal(_policy(seed=9).get_flat(), _policy(seed=10).get_flat())


def test_initial_policy_is_near_uniform(rng) -> None:
    probs = CategoricalPolicyNet(34, 4, seed=0).distribution(rng.normal(size=(8, 34))).probs

    assert np.abs(probs - 0.25).max() < 0.05


def test_q_net_scores_every_action(rng) -> None:
    net = QNet(3, 4, hidden=(6,), seed=0)
    x = rng.normal(size=(2, 3))
    table = net.predict_all(x)

    assert table.shape == (2, 4)
    assert table[1, 2] == pytest.approx(net.predict(x[1:], np.array([2]))[0])
    with pytest.raises(DimensionError):
        net.predict(x, np.array([0]))


def test_architecture_round_trip() -> None:
    for net in (_policy(), ValueNet(3, input_domain="belief", hidden=(5,)), QNet(3, 4, hidden=(5,))):
        rebuilt = net_from_architecture(net.architecture())
        assert type(rebuilt) is type(net)
        assert rebuilt.architecture() == net.architecture()
        assert rebuilt.num_params == net.num_params
