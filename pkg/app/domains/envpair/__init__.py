from app.domains.envpair.belief import BeliefWindow, belief_dim, belief_update, initial_belief
from app.domains.envpair.layouts import build_tabular_pair, describe_states, make_named_pair, make_pair, render_ascii
from app.domains.envpair.models import (
    ACTION_NAMES,
    LAYOUTS,
    NUM_ACTIONS,
    PairSpec,
    ProcessPair,
    TrajectoryBatch,
)
from app.domains.envpair.sampling import ActionSource, Behavior, parallel_rollout, rollout, step

__all__ = [
    "ACTION_NAMES",
    "LAYOUTS",
    "NUM_ACTIONS",
    "ActionSource",
    "Behavior",
    "BeliefWindow",
    "PairSpec",
    "ProcessPair",
    "TrajectoryBatch",
    "belief_dim",
    "belief_update",
    "build_tabular_pair",
    "describe_states",
    "initial_belief",
    "make_named_pair",
    "make_pair",
    "parallel_rollout",
    "render_ascii",
    "rollout",
    "step",
]
