from app.domains.oracle.analysis import (
    exact_a2d,
    identifiability_report,
    implicit_of_greedy_return,
    lift_to_states,
    oracle_report,
    surrogate_bound_check,
)
from app.domains.oracle.chain import JointChain, build_chain, reachability_weights
from app.domains.oracle.models import MixturePolicy, OccupancyTable, TabularPolicy, ValueTable
from app.domains.oracle.solvers import (
    ail_fixed_point,
    ail_objective,
    expected_return,
    implicit_policy,
    occupancy,
    occupancy_series,
    optimal_mdp_policy,
    optimal_pomdp_policy,
    policy_evaluation,
)

__all__ = [
    "JointChain",
    "MixturePolicy",
    "OccupancyTable",
    "TabularPolicy",
    "ValueTable",
    "ail_fixed_point",
    "ail_objective",
    "build_chain",
    "exact_a2d",
    "expected_return",
    "identifiability_report",
    "implicit_of_greedy_return",
    "implicit_policy",
    "lift_to_states",
    "occupancy",
    "occupancy_series",
    "optimal_mdp_policy",
    "optimal_pomdp_policy",
    "oracle_report",
    "policy_evaluation",
    "reachability_weights",
    "surrogate_bound_check",
]
