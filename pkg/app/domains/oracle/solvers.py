from __future__ import annotations

import logging
import math

import numpy as np

from app.core.config import settings
from app.core.errors import InvalidArgumentError, PreconditionError, UnsupportedPairError
from app.core.numerics import categorical_kl
from app.domains.envpair.models import ProcessPair
from app.domains.oracle.chain import JointChain, build_chain, reachability_weights
from app.domains.oracle.models import (
    ChainPolicy,
    FixedPointReport,
    ImplicitPolicy,
    OccupancyTable,
    TabularPolicy,
    ValueDomain,
    ValueTable,
    greedy_rows,
)
from app.observability.metrics import observe_oracle

logger = logging.getLogger(__name__)

VALUE_ITERATION_TOLERANCE = 1e-10
FIXED_POINT_TOLERANCE = 1e-8
FIXED_POINT_MAX_ITERATIONS = 500
_MAX_VALUE_ITERATIONS = 200_000


def chain_for(pair: ProcessPair, policy: ChainPolicy, window: int) -> JointChain:
    chain = getattr(policy, "chain", None) or getattr(getattr(policy, "trainee", None), "chain", None)
    if chain is not None:
        if chain.pair is not pair:
            raise InvalidArgumentError("policy_chain", "policy beliefs were numbered on a different pair")
        return chain
    return build_chain(pair, window)


def _solve_linear(matrix: np.ndarray, rhs: np.ndarray, what: str) -> np.ndarray:
    try:
        solution = np.linalg.solve(matrix, rhs)
    except np.linalg.LinAlgError as exc:
        raise PreconditionError("singular_system", f"{what} system is singular; does the policy terminate?") from exc
    if not np.all(np.isfinite(solution)):
        raise PreconditionError("singular_system", f"{what} system has no finite solution")
    return solution


def occupancy(pair: ProcessPair, policy: ChainPolicy, *, window: int = 1) -> OccupancyTable:
    """Discounted visitation d(s, b) by solving the flow equations (series fallback on large chains)."""
    chain = chain_for(pair, policy, window)
    if not 0 < pair.gamma < 1:
        raise InvalidArgumentError("gamma", "occupancy needs a discount strictly below one")
    if chain.num_nodes > settings.ORACLE_DENSE_LIMIT:
        return occupancy_series(pair, policy, window=window)
    with observe_oracle("occupancy"):
        node_policy = policy.node_probs(chain)
        matrix = np.eye(chain.num_nodes) - pair.gamma * chain.transition_matrix(node_policy)
        mass = _solve_linear(matrix.T, (1.0 - pair.gamma) * chain.init, "occupancy")
    return OccupancyTable(chain=chain, mass=np.clip(mass, 0.0, None), truncation_error=0.0, method="solve")


def occupancy_series(
    pair: ProcessPair, policy: ChainPolicy, *, window: int = 1, eps: float | None = None
) -> OccupancyTable:
    """Geometric-series occupancy truncated once the discount weight drops below ``eps``."""
    chain = chain_for(pair, policy, window)
    eps = settings.ORACLE_OCCUPANCY_EPS if eps is None else eps
    with observe_oracle("occupancy_series"):
        node_policy = policy.node_probs(chain)
        dist = chain.init.copy()
        mass = np.zeros(chain.num_nodes)
        weight = 1.0
        while weight >= eps:
            mass += (1.0 - pair.gamma) * weight * dist
            dist = chain.propagate(dist, node_policy)
            weight *= pair.gamma
    return OccupancyTable(chain=chain, mass=mass, truncation_error=weight, method="series")


def implicit_policy(
    expert: TabularPolicy, occ: OccupancyTable, *, fallback_weights: np.ndarray | None = None
) -> ImplicitPolicy:
    """Belief rows equal to the occupancy-posterior average of expert rows.

    Beliefs without occupancy mass get uniform rows, or the posterior of
    ``fallback_weights`` when one is given; both cases are flagged.
    """
    if expert.domain != "state":
        raise InvalidArgumentError("expert_domain", "the expert must act on states")
    chain = occ.chain
    mask = chain.nonterminal
    expert_rows = expert.node_probs(chain)
    rows = np.zeros((chain.num_beliefs, expert.num_actions))
    np.add.at(rows, chain.node_belief[mask], occ.mass[mask, None] * expert_rows[mask])
    belief_mass = rows.sum(axis=1)
    zero_mass = belief_mass <= 0
    zero_mass[chain.terminal_belief] = False
    rows = np.divide(rows, belief_mass[:, None], out=np.zeros_like(rows), where=belief_mass[:, None] > 0)
    if fallback_weights is not None and zero_mass.any():
        fallback = np.zeros_like(rows)
        np.add.at(fallback, chain.node_belief[mask], fallback_weights[mask, None] * expert_rows[mask])
        fallback_mass = fallback.sum(axis=1, keepdims=True)
        use = zero_mass & (fallback_mass[:, 0] > 0)
        rows[use] = fallback[use] / fallback_mass[use]
    empty = rows.sum(axis=1) <= 0
    rows[empty] = 1.0 / expert.num_actions
    rows /= rows.sum(axis=1, keepdims=True)
    policy = TabularPolicy(domain="belief", probs=rows, chain=chain)
    return ImplicitPolicy(policy=policy, expert=expert, occupancy=occ, zero_mass=zero_mass)


def ail_objective(expert: TabularPolicy, trainee: TabularPolicy, occ: OccupancyTable) -> float:
    """Expected KL(expert(.|s) || trainee(.|b)) under the occupancy; ``inf`` on missing support."""
    chain = occ.chain
    mask = chain.nonterminal & (occ.mass > 0)
    kl = categorical_kl(expert.node_probs(chain)[mask], trainee.node_probs(chain)[mask])
    if np.any(np.isinf(kl)):
        return math.inf
    return float(np.dot(occ.mass[mask], kl))


def _state_values(pair: ProcessPair, policy: TabularPolicy, gamma: float) -> ValueTable:
    live = ~pair.terminal
    expected = (pair.transitions * pair.rewards).sum(axis=2)
    p_pi = np.einsum("sa,sat->st", policy.probs, pair.transitions)
    r_pi = (policy.probs * expected).sum(axis=1)
    values = np.zeros(pair.num_states)
    matrix = np.eye(int(live.sum())) - gamma * p_pi[np.ix_(live, live)]
    values[live] = _solve_linear(matrix, r_pi[live], "state evaluation")
    q = expected + gamma * np.einsum("sat,t->sa", pair.transitions, values)
    q[pair.terminal] = 0.0
    return ValueTable(domain="state", V=values, Q=q)


def joint_values(chain: JointChain, node_policy: np.ndarray, gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """V and Q over chain nodes; the terminal node is pinned at zero."""
    live = chain.nonterminal
    r_pi = chain.expected_rewards(node_policy)
    values = np.zeros(chain.num_nodes)
    if chain.num_nodes <= settings.ORACLE_DENSE_LIMIT:
        p_pi = chain.transition_matrix(node_policy)
        matrix = np.eye(int(live.sum())) - gamma * p_pi[np.ix_(live, live)]
        values[live] = _solve_linear(matrix, r_pi[live], "joint evaluation")
    else:
        for _ in range(_MAX_VALUE_ITERATIONS):
            updated = r_pi + gamma * (node_policy * (chain.prob * values[chain.succ]).sum(axis=2)).sum(axis=1)
            updated[chain.terminal_node] = 0.0
            residual = np.max(np.abs(updated - values))
            values = updated
            if residual < VALUE_ITERATION_TOLERANCE:
                break
        else:
            raise PreconditionError("evaluation_diverged", "iterative evaluation did not settle")
    q = (chain.prob * (chain.reward + gamma * values[chain.succ])).sum(axis=2)
    q[chain.terminal_node] = 0.0
    return values, q


def policy_evaluation(
    pair: ProcessPair,
    policy: ChainPolicy,
    domain: ValueDomain = "joint",
    *,
    window: int = 1,
    gamma: float | None = None,
) -> ValueTable:
    """Exact V and Q on states, beliefs or joint (state, belief) nodes.

    ``gamma=1`` evaluates undiscounted returns and requires a terminating policy.
    """
    gamma = pair.gamma if gamma is None else gamma
    with observe_oracle("policy_evaluation"):
        if domain == "state":
            if not isinstance(policy, TabularPolicy) or policy.domain != "state":
                raise InvalidArgumentError("policy_domain", "state-domain evaluation needs a state policy")
            return _state_values(pair, policy, gamma)
        chain = chain_for(pair, policy, window)
        values, q = joint_values(chain, policy.node_probs(chain), gamma)
        if domain == "joint":
            return ValueTable(domain="joint", V=values, Q=q, chain=chain)
        if not isinstance(policy, TabularPolicy) or policy.domain != "belief":
            raise InvalidArgumentError("policy_domain", "belief-domain evaluation needs a belief policy")
        posterior = occupancy(pair, policy, window=window).posterior()
        belief_v = np.bincount(chain.node_belief, weights=posterior * values, minlength=chain.num_beliefs)
        belief_q = np.zeros((chain.num_beliefs, chain.num_actions))
        np.add.at(belief_q, chain.node_belief, posterior[:, None] * q)
        return ValueTable(domain="belief", V=belief_v, Q=belief_q, chain=chain)


def expected_return(
    pair: ProcessPair, policy: ChainPolicy, *, window: int = 1, horizon: int | None = None
) -> float:
    """Exact undiscounted return over the episode horizon by forward propagation."""
    chain = chain_for(pair, policy, window)
    horizon = pair.horizon if horizon is None else horizon
    node_policy = policy.node_probs(chain)
    rewards = chain.expected_rewards(node_policy)
    dist = chain.init.copy()
    total = 0.0
    for _ in range(horizon):
        total += float(np.dot(dist, rewards))
        dist = chain.propagate(dist, node_policy)
        if dist[chain.nonterminal].sum() <= 0.0:
            break
    return total


def optimal_mdp_policy(pair: ProcessPair) -> tuple[TabularPolicy, float]:
    """Value iteration over states; greedy policy with lowest-index tie-break."""
    with observe_oracle("optimal_mdp_policy"):
        expected = (pair.transitions * pair.rewards).sum(axis=2)
        values = np.zeros(pair.num_states)
        for _ in range(_MAX_VALUE_ITERATIONS):
            q = expected + pair.gamma * np.einsum("sat,t->sa", pair.transitions, values)
            q[pair.terminal] = 0.0
            updated = q.max(axis=1)
            residual = np.max(np.abs(updated - values))
            values = updated
            if residual < VALUE_ITERATION_TOLERANCE:
                break
        rows = greedy_rows(q)
    policy = TabularPolicy(domain="state", probs=rows)
    return policy, expected_return(pair, policy)


def check_belief_markov(chain: JointChain, weights: np.ndarray) -> None:
    """Each (b, a) must lead to one belief, or only to beliefs that pin down the state."""
    identifying = chain.states_per_belief() == 1
    live = chain.nonterminal & (weights > 0)
    for b in range(chain.num_beliefs):
        nodes = np.flatnonzero(live & (chain.node_belief == b))
        if nodes.size == 0:
            continue
        for a in range(chain.num_actions):
            targets = chain.succ[nodes, a][chain.prob[nodes, a] > 0]
            beliefs = {int(chain.node_belief[t]) for t in targets if t != chain.terminal_node}
            if len(beliefs) > 1 and not all(identifying[x] for x in beliefs):
                raise UnsupportedPairError(
                    "belief_not_markov",
                    f"belief {b} under action {a} branches into ambiguous beliefs {sorted(beliefs)}",
                    belief=b,
                    action=a,
                )


def belief_mdp(chain: JointChain, weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Transition ``(B, A, B)`` and reward ``(B, A)`` tables of the belief process under posterior weights."""
    check_belief_markov(chain, weights)
    live = chain.nonterminal
    belief_mass = np.bincount(chain.node_belief[live], weights=weights[live], minlength=chain.num_beliefs)
    posterior = np.divide(
        weights, belief_mass[chain.node_belief], out=np.zeros_like(weights), where=belief_mass[chain.node_belief] > 0
    )
    posterior[~live] = 0.0
    num_beliefs, num_actions = chain.num_beliefs, chain.num_actions
    transitions = np.zeros((num_beliefs, num_actions, num_beliefs))
    rewards = np.zeros((num_beliefs, num_actions))
    nodes = np.flatnonzero(live)
    for a in range(num_actions):
        w = posterior[nodes, None] * chain.prob[nodes, a]
        np.add.at(
            transitions[:, a, :],
            (np.repeat(chain.node_belief[nodes], chain.succ.shape[2]), chain.node_belief[chain.succ[nodes, a]].ravel()),
            w.ravel(),
        )
        np.add.at(rewards[:, a], chain.node_belief[nodes], (w * chain.reward[nodes, a]).sum(axis=1))
    unsupported = transitions.sum(axis=2) <= 0
    for b, a in zip(*np.nonzero(unsupported), strict=True):
        transitions[b, a, chain.terminal_belief] = 1.0
    return transitions, rewards


def solve_belief_mdp(chain: JointChain, weights: np.ndarray, gamma: float) -> np.ndarray:
    transitions, rewards = belief_mdp(chain, weights)
    values = np.zeros(chain.num_beliefs)
    for _ in range(_MAX_VALUE_ITERATIONS):
        q = rewards + gamma * np.einsum("bac,c->ba", transitions, values)
        q[chain.terminal_belief] = 0.0
        updated = q.max(axis=1)
        residual = np.max(np.abs(updated - values))
        values = updated
        if residual < VALUE_ITERATION_TOLERANCE:
            break
    return greedy_rows(q)


def optimal_pomdp_policy(pair: ProcessPair, *, window: int = 1) -> tuple[TabularPolicy, float]:
    """Value iteration on the belief process, weighting states by reachable initial mass."""
    chain = build_chain(pair, window)
    with observe_oracle("optimal_pomdp_policy"):
        rows = solve_belief_mdp(chain, reachability_weights(chain), pair.gamma)
    policy = TabularPolicy(domain="belief", probs=rows, chain=chain)
    return policy, expected_return(pair, policy)


def max_row_tv(first: TabularPolicy, second: TabularPolicy) -> float:
    return float(0.5 * np.abs(first.probs - second.probs).sum(axis=1).max())


def ail_fixed_point(
    pair: ProcessPair,
    expert: TabularPolicy,
    *,
    window: int = 1,
    tolerance: float = FIXED_POINT_TOLERANCE,
    max_iterations: int = FIXED_POINT_MAX_ITERATIONS,
) -> FixedPointReport:
    """Iterate trainee <- implicit(expert, occupancy(trainee)) from a uniform trainee."""
    chain = build_chain(pair, window)
    trainee = TabularPolicy.uniform("belief", chain.num_beliefs, pair.num_actions, chain)
    residual = math.inf
    iterations = 0
    with observe_oracle("ail_fixed_point"):
        for iterations in range(1, max_iterations + 1):
            updated = implicit_policy(expert, occupancy(pair, trainee, window=window)).policy
            residual = max_row_tv(updated, trainee)
            trainee = updated
            if residual < tolerance:
                break
    converged = residual < tolerance
    if not converged:
        logger.warning("AIL fixed point on %s stopped after %s iterations (residual %.3e)", pair.name, iterations, residual)
    return FixedPointReport(
        trainee=trainee,
        iterations=iterations,
        residual=residual,
        converged=converged,
        stochastic_return=expected_return(pair, trainee),
        deterministic_return=expected_return(pair, trainee.argmax()),
    )
