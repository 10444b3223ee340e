"""Exact gradients over softmax-tabular policies.

Experts are parameterized by per-state logits ``(S, A)`` and trainees by
per-belief logits ``(B, A)``. Every expectation is summed analytically over
the chain, so these are the reference values the sampled estimators in
``app.ml`` and ``app.services`` are checked against.
"""

from __future__ import annotations

import numpy as np

from app.core.errors import DimensionError, InvalidArgumentError
from app.domains.envpair.models import ProcessPair
from app.domains.oracle.models import OccupancyTable, TabularPolicy
from app.domains.oracle.solvers import joint_values, occupancy


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def _check_logits(logits: np.ndarray, rows: int, num_actions: int, what: str) -> np.ndarray:
    logits = np.asarray(logits, dtype=float)
    if logits.shape != (rows, num_actions):
        raise DimensionError(f"{what}_shape", f"expected {what} of shape {(rows, num_actions)}, got {logits.shape}")
    return logits


def ail_objective_grad(expert: TabularPolicy, trainee_logits: np.ndarray, occ: OccupancyTable) -> np.ndarray:
    """Gradient of the occupancy-weighted KL(expert || softmax(trainee_logits)) w.r.t. the trainee logits.

    The occupancy is held fixed. Per belief this is d(b) * pi(b) - sum_{s} d(s, b) * expert(s).
    """
    chain = occ.chain
    logits = _check_logits(trainee_logits, chain.num_beliefs, expert.num_actions, "trainee_logits")
    trainee = softmax_rows(logits)
    live = chain.nonterminal
    grad = np.zeros_like(logits)
    nodes = np.flatnonzero(live)
    residual = trainee[chain.node_belief[nodes]] - expert.node_probs(chain)[nodes]
    np.add.at(grad, chain.node_belief[nodes], occ.mass[nodes, None] * residual)
    grad[chain.terminal_belief] = 0.0
    return grad


def trainee_q(
    pair: ProcessPair, trainee: TabularPolicy, *, window: int = 1
) -> tuple[OccupancyTable, np.ndarray, np.ndarray]:
    """Occupancy of the trainee with its joint Q(s, b, a) and belief Q(b, a)."""
    if trainee.domain != "belief":
        raise InvalidArgumentError("policy_domain", "trainee Q values need a belief policy")
    occ = occupancy(pair, trainee, window=window)
    _, joint_q = joint_values(occ.chain, trainee.node_probs(occ.chain), pair.gamma)
    return occ, joint_q, belief_q_values(occ, joint_q)


def belief_q_values(occ: OccupancyTable, joint_q: np.ndarray) -> np.ndarray:
    chain = occ.chain
    belief_q = np.zeros((chain.num_beliefs, joint_q.shape[1]))
    np.add.at(belief_q, chain.node_belief, occ.posterior()[:, None] * joint_q)
    return belief_q


def surrogate_objective(expert_logits: np.ndarray, occ: OccupancyTable, belief_q: np.ndarray) -> float:
    """Trainee-Q surrogate: sum_n d(n) sum_a expert(a|s_n) Q(b_n, a)."""
    chain = occ.chain
    expert = softmax_rows(_check_logits(expert_logits, chain.pair.num_states, belief_q.shape[1], "expert_logits"))
    nodes = np.flatnonzero(chain.nonterminal)
    per_node = (expert[chain.node_state[nodes]] * belief_q[chain.node_belief[nodes]]).sum(axis=1)
    return float(np.dot(occ.mass[nodes], per_node))


def _baseline_per_node(baseline: float | np.ndarray | None, num_nodes: int) -> np.ndarray:
    if baseline is None:
        return np.zeros(num_nodes)
    values = np.broadcast_to(np.asarray(baseline, dtype=float), (num_nodes,))
    return np.array(values)


def _expert_gradient(
    expert_logits: np.ndarray,
    trainee: TabularPolicy,
    occ: OccupancyTable,
    node_q: np.ndarray,
    baseline: float | np.ndarray | None,
) -> np.ndarray:
    chain = occ.chain
    logits = _check_logits(expert_logits, chain.pair.num_states, trainee.num_actions, "expert_logits")
    expert = softmax_rows(logits)
    nodes = np.flatnonzero(chain.nonterminal & (occ.mass > 0))
    theta = expert[chain.node_state[nodes]]
    behavior = trainee.node_probs(chain)[nodes]
    # Actions the trainee never takes contribute nothing to the sampled estimator.
    ratio = np.divide(theta, behavior, out=np.zeros_like(theta), where=behavior > 0)
    advantage = node_q[nodes] - _baseline_per_node(baseline, chain.num_nodes)[nodes, None]
    weight = occ.mass[nodes, None] * behavior * ratio * advantage
    # sum_a w_a (e_a - theta) = w - theta * sum_a w_a
    score = weight - theta * weight.sum(axis=1, keepdims=True)
    grad = np.zeros_like(logits)
    np.add.at(grad, chain.node_state[nodes], score)
    return grad


def expert_gradient_q(
    expert_logits: np.ndarray,
    trainee: TabularPolicy,
    occ: OccupancyTable,
    belief_q: np.ndarray,
    *,
    baseline: float | np.ndarray | None = None,
) -> np.ndarray:
    """Expected importance-weighted expert gradient driven by the trainee's belief Q(b, a).

    With full trainee support this equals the gradient of :func:`surrogate_objective`.
    ``baseline`` may be a scalar or one value per chain node.
    """
    chain = occ.chain
    return _expert_gradient(expert_logits, trainee, occ, belief_q[chain.node_belief], baseline)


def expert_gradient_mc(
    expert_logits: np.ndarray,
    trainee: TabularPolicy,
    occ: OccupancyTable,
    joint_q: np.ndarray,
    *,
    baseline: float | np.ndarray | None = None,
) -> np.ndarray:
    """Expectation of the Monte-Carlo (lambda = 1) expert gradient.

    Rollout returns condition on the true state, so the signal is the joint
    Q(s, b, a) instead of the belief Q(b, a).
    """
    return _expert_gradient(expert_logits, trainee, occ, joint_q, baseline)
