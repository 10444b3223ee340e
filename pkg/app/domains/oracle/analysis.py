from __future__ import annotations

import itertools
import logging
import math
from collections.abc import Sequence
from typing import Any

import numpy as np

from app.core.config import settings
from app.core.errors import InvalidArgumentError
from app.domains.envpair.models import ProcessPair
from app.domains.oracle.chain import JointChain, build_chain, reachability_weights
from app.domains.oracle.models import (
    ExactA2dReport,
    ExpertSearch,
    IdentifiabilityReport,
    OccupancyTable,
    SurrogateBoundReport,
    TabularPolicy,
    greedy_rows,
)
from app.domains.oracle.solvers import (
    FIXED_POINT_MAX_ITERATIONS,
    FIXED_POINT_TOLERANCE,
    ail_fixed_point,
    ail_objective,
    expected_return,
    implicit_policy,
    joint_values,
    max_row_tv,
    occupancy,
    optimal_mdp_policy,
    optimal_pomdp_policy,
)
from app.observability.metrics import observe_oracle

logger = logging.getLogger(__name__)

IDENTIFIABILITY_THRESHOLD = 1e-8
SURROGATE_SLACK = 1e-9
ASCENT_MAX_SWEEPS = 20
ASCENT_MIN_GAIN = 1e-12


def identifiability_report(pair: ProcessPair, *, window: int = 1) -> IdentifiabilityReport:
    expert, expert_return = optimal_mdp_policy(pair)
    fixed_point = ail_fixed_point(pair, expert, window=window)
    divergence = ail_objective(expert, fixed_point.trainee, occupancy(pair, fixed_point.trainee, window=window))
    _, pomdp_optimum = optimal_pomdp_policy(pair, window=window)
    report = IdentifiabilityReport(
        identifiable=divergence < IDENTIFIABILITY_THRESHOLD,
        divergence=divergence,
        expert_return=expert_return,
        fixed_point_return=fixed_point.stochastic_return,
        fixed_point_deterministic_return=fixed_point.deterministic_return,
        pomdp_optimum=pomdp_optimum,
        return_gap=pomdp_optimum - fixed_point.deterministic_return,
        fixed_point_converged=fixed_point.converged,
    )
    logger.info("Identifiability of %s: identifiable=%s divergence=%.6g", pair.name, report.identifiable, divergence)
    return report


def dominant_beliefs(chain: JointChain, weights: np.ndarray) -> np.ndarray:
    """For every pair state, the belief holding most of its weight (lowest id on ties)."""
    best = np.full(chain.pair.num_states, chain.terminal_belief, dtype=int)
    best_weight = np.full(chain.pair.num_states, -1.0)
    for node in np.flatnonzero(chain.nonterminal):
        s, b, w = chain.node_state[node], chain.node_belief[node], weights[node]
        if w > best_weight[s] or (w == best_weight[s] and b < best[s]):
            best[s], best_weight[s] = b, w
    return best


def lift_to_states(chain: JointChain, belief_rows: np.ndarray, weights: np.ndarray) -> TabularPolicy:
    pair = chain.pair
    rows = np.full((pair.num_states, pair.num_actions), 1.0 / pair.num_actions)
    beliefs = dominant_beliefs(chain, weights)
    live = beliefs != chain.terminal_belief
    rows[live] = belief_rows[beliefs[live]]
    return TabularPolicy(domain="state", probs=rows)


def _implicit_value(expert: TabularPolicy, occ: OccupancyTable, fallback: np.ndarray) -> float:
    chain = occ.chain
    implicit = implicit_policy(expert, occ, fallback_weights=fallback).policy
    values, _ = joint_values(chain, implicit.node_probs(chain), chain.pair.gamma)
    return float(np.dot(occ.mass, values))


def _implicit_return(expert: TabularPolicy, occ: OccupancyTable, fallback: np.ndarray) -> float:
    implicit = implicit_policy(expert, occ, fallback_weights=fallback).policy
    return expected_return(occ.chain.pair, implicit, window=occ.chain.window)


def _reached_or_prior(occ: OccupancyTable, prior: np.ndarray) -> np.ndarray:
    belief_mass = occ.belief_marginal()[occ.chain.node_belief]
    return np.where(belief_mass > 0, occ.mass, prior)


def _belief_q(chain: JointChain, trainee: TabularPolicy, weights: np.ndarray) -> np.ndarray:
    """Trainee Q per belief, averaging the nodes of each belief in proportion to ``weights``."""
    _, joint_q = joint_values(chain, trainee.node_probs(chain), chain.pair.gamma)
    mass = np.bincount(chain.node_belief, weights=weights, minlength=chain.num_beliefs)[chain.node_belief]
    posterior = np.divide(weights, mass, out=np.zeros_like(weights), where=mass > 0)
    belief_q = np.zeros((chain.num_beliefs, chain.num_actions))
    np.add.at(belief_q, chain.node_belief, posterior[:, None] * joint_q)
    return belief_q


def _enumerable(pair: ProcessPair, max_enumeration: int | None) -> bool:
    limit = settings.ORACLE_MAX_ENUMERATION if max_enumeration is None else max_enumeration
    return pair.num_actions ** int(np.count_nonzero(~pair.terminal)) <= limit


def _expert_count(pair: ProcessPair) -> str:
    return f"{pair.num_actions}^{int(np.count_nonzero(~pair.terminal))}"


def _deterministic(pair: ProcessPair, choice: np.ndarray) -> TabularPolicy:
    rows = np.eye(pair.num_actions)[choice]
    rows[pair.terminal] = 1.0 / pair.num_actions
    return TabularPolicy(domain="state", probs=rows)


def _ascent_moves(chain: JointChain, weights: np.ndarray) -> list[np.ndarray]:
    beliefs = dominant_beliefs(chain, weights)
    live = beliefs != chain.terminal_belief
    groups = [np.flatnonzero(live & (beliefs == b)) for b in np.unique(beliefs[live])]
    singles = [group[i : i + 1] for group in groups if len(group) > 1 for i in range(len(group))]
    return groups + singles


def search_experts(
    occ: OccupancyTable,
    fallback: np.ndarray,
    *,
    starts: Sequence[TabularPolicy] = (),
    max_enumeration: int | None = None,
    max_sweeps: int = ASCENT_MAX_SWEEPS,
) -> ExpertSearch:
    """Deterministic expert whose implicit policy has the largest occupancy-weighted value.

    Every deterministic expert is scored when there are at most ``max_enumeration``
    of them. Otherwise coordinate ascent starts from the best of ``starts`` and
    switches the action of all states sharing a belief, then of single states,
    until a sweep finds no strict improvement; that result is a local optimum only.
    Earlier ``starts`` win ties.
    """
    chain = occ.chain
    pair = chain.pair
    live_states = np.flatnonzero(~pair.terminal)
    evaluations = 0

    def score(choice: np.ndarray) -> float:
        nonlocal evaluations
        evaluations += 1
        return _implicit_value(_deterministic(pair, choice), occ, fallback)

    if _enumerable(pair, max_enumeration):
        best, best_choice = -math.inf, np.zeros(pair.num_states, dtype=int)
        for combo in itertools.product(range(pair.num_actions), repeat=len(live_states)):
            choice = np.zeros(pair.num_states, dtype=int)
            choice[live_states] = combo
            value = score(choice)
            if value > best:
                best, best_choice = value, choice
        return ExpertSearch(_deterministic(pair, best_choice), best, exhaustive=True, evaluations=evaluations)

    if not starts:
        raise InvalidArgumentError("search_starts", "coordinate ascent needs at least one starting expert")
    best, choice = -math.inf, np.zeros(pair.num_states, dtype=int)
    for start in starts:
        candidate = np.argmax(start.probs, axis=1)
        value = score(candidate)
        if value > best:
            best, choice = value, candidate

    moves = _ascent_moves(chain, _reached_or_prior(occ, fallback))
    for _ in range(max_sweeps):
        improved = False
        for group in moves:
            for action in range(pair.num_actions):
                if np.all(choice[group] == action):
                    continue
                trial = choice.copy()
                trial[group] = action
                value = score(trial)
                if value > best + ASCENT_MIN_GAIN:
                    best, choice, improved = value, trial, True
        if not improved:
            break
    else:
        logger.debug("Coordinate ascent on %s still improving after %s sweeps", pair.name, max_sweeps)
    return ExpertSearch(_deterministic(pair, choice), best, exhaustive=False, evaluations=evaluations)


def surrogate_bound_check(
    pair: ProcessPair,
    trainee: TabularPolicy,
    *,
    window: int = 1,
    max_enumeration: int | None = None,
) -> SurrogateBoundReport:
    """Compare the trainee-Q surrogate against implicit-policy values, both weighted by the trainee occupancy.

    The report also carries the undiscounted returns of the two maximizers' implicit
    policies; at an optimal trainee both equal its return.
    """
    chain = trainee.chain or build_chain(pair, window)
    with observe_oracle("surrogate_bound_check"):
        occ = occupancy(pair, trainee, window=window)
        belief_q = _belief_q(chain, trainee, occ.mass)
        live = chain.nonterminal
        per_state = np.zeros((pair.num_states, pair.num_actions))
        np.add.at(per_state, chain.node_state[live], occ.mass[live, None] * belief_q[chain.node_belief[live]])
        lhs = float(per_state.max(axis=1)[~pair.terminal].sum())
        greedy = TabularPolicy(domain="state", probs=greedy_rows(per_state))

        fallback = reachability_weights(chain)
        starts: list[TabularPolicy] = []
        if not _enumerable(pair, max_enumeration):
            logger.warning(
                "Surrogate bound on %s searched locally (%s deterministic experts exceed %s)",
                pair.name,
                _expert_count(pair),
                settings.ORACLE_MAX_ENUMERATION if max_enumeration is None else max_enumeration,
            )
            starts = _heuristic_experts(pair, chain, trainee, greedy, window)
        search = search_experts(occ, fallback, starts=starts, max_enumeration=max_enumeration)
        surrogate_return = _implicit_return(greedy, occ, fallback)
        best_return = _implicit_return(search.expert, occ, fallback)
    holds = lhs <= search.value + SURROGATE_SLACK
    if not holds:
        logger.warning("Surrogate bound violated on %s: lhs=%.9f rhs=%.9f", pair.name, lhs, search.value)
    return SurrogateBoundReport(
        lhs=lhs,
        rhs=search.value,
        holds=holds,
        exhaustive=search.exhaustive,
        candidates_checked=search.evaluations,
        surrogate_expert_return=surrogate_return,
        best_expert_return=best_return,
        best_expert=search.expert,
    )


def _heuristic_experts(
    pair: ProcessPair, chain: JointChain, trainee: TabularPolicy, greedy: TabularPolicy, window: int
) -> list[TabularPolicy]:
    weights = reachability_weights(chain)
    pomdp, _ = optimal_pomdp_policy(pair, window=window)
    mdp, _ = optimal_mdp_policy(pair)
    return [
        greedy,
        lift_to_states(chain, trainee.argmax().probs, weights),
        lift_to_states(chain, pomdp.probs, weights),
        mdp,
    ]


def exact_a2d(
    pair: ProcessPair,
    *,
    window: int = 1,
    tolerance: float = FIXED_POINT_TOLERANCE,
    max_iterations: int = FIXED_POINT_MAX_ITERATIONS,
    max_enumeration: int | None = None,
) -> ExactA2dReport:
    """Alternate an expert search under the trainee's occupancy with an exact projection.

    The expert step picks the deterministic expert whose implicit policy scores
    best under the current trainee's occupancy (:func:`search_experts`), and the
    projection replaces the trainee by that implicit policy. Beliefs the trainee
    never reaches take their rows from the reachable initial mass.
    """
    chain = build_chain(pair, window)
    prior = reachability_weights(chain)
    trainee = TabularPolicy.uniform("belief", chain.num_beliefs, pair.num_actions, chain)
    expert: TabularPolicy | None = None
    exhaustive = _enumerable(pair, max_enumeration)
    if not exhaustive:
        logger.warning(
            "Exact A2D on %s searches experts by coordinate ascent (%s deterministic experts); the result is not certified",
            pair.name,
            _expert_count(pair),
        )
    returns: list[float] = []
    objectives: list[float] = []
    evaluations = 0
    converged = False
    iterations = 0
    with observe_oracle("exact_a2d"):
        for iterations in range(1, max_iterations + 1):
            occ = occupancy(pair, trainee, window=window)
            starts: list[TabularPolicy] = []
            if not exhaustive:
                weights = _reached_or_prior(occ, prior)
                starts = [
                    lift_to_states(chain, greedy_rows(_belief_q(chain, trainee, weights)), weights),
                    lift_to_states(chain, trainee.argmax().probs, weights),
                ]
                if expert is not None:
                    starts.insert(0, expert)
            search = search_experts(occ, prior, starts=starts, max_enumeration=max_enumeration)
            expert = search.expert
            evaluations += search.evaluations
            objectives.append(search.value)
            updated = implicit_policy(expert, occ, fallback_weights=prior).policy
            residual = max_row_tv(updated, trainee)
            trainee = updated
            returns.append(expected_return(pair, trainee, window=window))
            if residual < tolerance:
                converged = True
                break
    logger.info(
        "Exact A2D on %s: %s iterations, %s expert evaluations, return %.6f",
        pair.name,
        iterations,
        evaluations,
        returns[-1],
    )
    return ExactA2dReport(
        trainee=trainee,
        expert=expert,
        iterations=iterations,
        converged=converged,
        returns=tuple(returns),
        objectives=tuple(objectives),
        exhaustive=exhaustive,
        evaluations=evaluations,
    )


def implicit_of_greedy_return(pair: ProcessPair, *, window: int = 1) -> float:
    """Return of the implicit policy of the optimal expert under the expert's own occupancy."""
    expert, _ = optimal_mdp_policy(pair)
    return expected_return(pair, implicit_policy(expert, occupancy(pair, expert, window=window)).policy)


def oracle_report(pair: ProcessPair, *, window: int = 1) -> dict[str, Any]:
    identifiability = identifiability_report(pair, window=window)
    chain = build_chain(pair, window)
    uniform = TabularPolicy.uniform("belief", chain.num_beliefs, pair.num_actions, chain)
    bound = surrogate_bound_check(pair, uniform, window=window)
    a2d = exact_a2d(pair, window=window)
    return {
        "env": pair.name,
        "window": window,
        "num_states": pair.num_states,
        "num_nodes": chain.num_nodes,
        "num_beliefs": chain.num_beliefs,
        "mdp_opt": identifiability.expert_return,
        "pomdp_opt": identifiability.pomdp_optimum,
        "identifiable": identifiability.identifiable,
        "divergence": identifiability.divergence,
        "ail_fixed_point_return": identifiability.fixed_point_return,
        "ail_fixed_point_deterministic_return": identifiability.fixed_point_deterministic_return,
        "implicit_of_greedy_return": implicit_of_greedy_return(pair, window=window),
        "return_gap": identifiability.return_gap,
        "surrogate_bound_uniform_trainee": bound.to_dict(),
        "exact_a2d_return": a2d.final_return,
        "exact_a2d_iterations": a2d.iterations,
        "exact_a2d_exhaustive": a2d.exhaustive,
    }
