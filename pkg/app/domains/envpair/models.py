from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from app.core.errors import DimensionError, InvalidArgumentError, PreconditionError

NORTH, EAST, SOUTH, WEST = 0, 1, 2, 3
NUM_ACTIONS = 4
ACTION_NAMES = ("north", "east", "south", "west")
ACTION_DELTAS = ((0, -1), (1, 0), (0, 1), (-1, 0))

STEP_REWARD = -2.0
GOAL_REWARD = 20.0
HAZARD_REWARD = -100.0
DISCOUNT = 0.995
HORIZON = 200

LAYOUTS = (
    "frozen_lake",
    "frozen_lake_visible",
    "tiger_door_0",
    "tiger_door_1",
    "tiger_door_2",
    "tiger_door_3",
)

Cell = tuple[int, int]
ViewKind = Literal["state", "observation"]


@dataclass(frozen=True)
class PairSpec:
    layout: str
    grid_size: int = 5
    step_reward: float = STEP_REWARD
    goal_reward: float = GOAL_REWARD
    hazard_reward: float = HAZARD_REWARD
    gamma: float = DISCOUNT
    horizon: int = HORIZON


@dataclass(frozen=True)
class GridLayout:
    """Geometry behind a gridworld pair, kept for rendering and diagnostics."""

    width: int
    height: int
    start: Cell
    walls: frozenset[Cell]
    goal_cells: frozenset[Cell]
    hazard_cells: frozenset[Cell]
    buttons: frozenset[Cell] = frozenset()
    switches: frozenset[Cell] = frozenset()
    button_detour_cost: float = 0.0


@dataclass(frozen=True, eq=False)
class ProcessPair:
    """An MDP and a POMDP sharing dynamics, rewards and initial distribution.

    The two members differ only in what ``observe`` returns: the MDP sees
    ``state_vecs``, the POMDP sees ``obs_vecs``. Arrays are read-only so a
    pair can be shared across rollout threads.
    """

    name: str
    transitions: np.ndarray
    rewards: np.ndarray
    init_dist: np.ndarray
    terminal: np.ndarray
    state_vecs: np.ndarray
    obs_vecs: np.ndarray
    gamma: float = DISCOUNT
    horizon: int = HORIZON
    labels: tuple[str, ...] = ()
    grid: GridLayout | None = None
    spec: PairSpec | None = None

    def __post_init__(self) -> None:
        transitions = np.array(self.transitions, dtype=float)
        if transitions.ndim != 3 or transitions.shape[0] != transitions.shape[2]:
            raise DimensionError("transition_shape", f"expected (S, A, S) transitions, got {transitions.shape}")
        num_states, num_actions, _ = transitions.shape
        rewards = np.array(self.rewards, dtype=float)
        if rewards.shape != transitions.shape:
            raise DimensionError("reward_shape", f"rewards {rewards.shape} do not match transitions {transitions.shape}")
        init_dist = np.array(self.init_dist, dtype=float)
        terminal = np.array(self.terminal, dtype=bool)
        state_vecs = np.array(self.state_vecs, dtype=float)
        obs_vecs = np.array(self.obs_vecs, dtype=float)
        for name, array in (("init_dist", init_dist), ("terminal", terminal)):
            if array.shape != (num_states,):
                raise DimensionError(f"{name}_shape", f"{name} must have shape ({num_states},)")
        for name, array in (("state_vecs", state_vecs), ("obs_vecs", obs_vecs)):
            if array.ndim != 2 or array.shape[0] != num_states:
                raise DimensionError(f"{name}_shape", f"{name} must have {num_states} rows")
        if np.any(transitions < 0) or np.max(np.abs(transitions.sum(axis=2) - 1.0)) > 1e-12:
            raise InvalidArgumentError("transition_rows", "transition rows must be distributions")
        if abs(init_dist.sum() - 1.0) > 1e-12 or np.any(init_dist < 0):
            raise InvalidArgumentError("init_dist", "initial distribution must sum to one")
        if np.any(init_dist[terminal] > 0):
            raise InvalidArgumentError("init_dist", "initial distribution must not cover terminal states")
        for s in np.flatnonzero(terminal):
            if not np.allclose(transitions[s, :, s], 1.0) or np.any(rewards[s] != 0):
                raise InvalidArgumentError("terminal_state", f"terminal state {s} must be absorbing with zero reward")
        if not 0 < self.gamma <= 1:
            raise InvalidArgumentError("gamma", "discount must lie in (0, 1]")
        if num_actions < 1 or self.horizon < 1:
            raise InvalidArgumentError("pair_shape", "pairs need at least one action and a positive horizon")

        labels = self.labels or tuple(f"s{i}" for i in range(num_states))
        for name, array in (
            ("transitions", transitions),
            ("rewards", rewards),
            ("init_dist", init_dist),
            ("terminal", terminal),
            ("state_vecs", state_vecs),
            ("obs_vecs", obs_vecs),
        ):
            array.setflags(write=False)
            object.__setattr__(self, name, array)
        object.__setattr__(self, "labels", tuple(labels))

    @property
    def num_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transitions.shape[1]

    @property
    def state_dim(self) -> int:
        return self.state_vecs.shape[1]

    @property
    def obs_dim(self) -> int:
        return self.obs_vecs.shape[1]

    @property
    def initial_states(self) -> np.ndarray:
        return np.flatnonzero(self.init_dist > 0)

    def enumerate_states(self) -> range:
        return range(self.num_states)

    def transition_probs(self, s: int, a: int) -> np.ndarray:
        return self.transitions[s, a]

    def reward(self, s: int, a: int, s_next: int) -> float:
        return float(self.rewards[s, a, s_next])

    def is_terminal(self, s: int) -> bool:
        return bool(self.terminal[s])

    def observe(self, s: int) -> np.ndarray:
        return self.obs_vecs[s]

    def state_vector(self, s: int) -> np.ndarray:
        return self.state_vecs[s]

    def is_point_mass(self) -> bool:
        return bool(np.all(self.transitions.max(axis=2) == 1.0))

    def mdp_view(self) -> PairView:
        return PairView(pair=self, kind="state")

    def pomdp_view(self) -> PairView:
        return PairView(pair=self, kind="observation")


@dataclass(frozen=True)
class PairView:
    pair: ProcessPair
    kind: ViewKind

    @property
    def init_dist(self) -> np.ndarray:
        return self.pair.init_dist

    def enumerate_states(self) -> range:
        return self.pair.enumerate_states()

    def transition_probs(self, s: int, a: int) -> np.ndarray:
        return self.pair.transition_probs(s, a)

    def reward(self, s: int, a: int, s_next: int) -> float:
        return self.pair.reward(s, a, s_next)

    def observe(self, s: int) -> np.ndarray:
        if self.kind == "state":
            return self.pair.state_vector(s)
        return self.pair.observe(s)


@dataclass(frozen=True)
class StepOutcome:
    s_next: int
    o_next: np.ndarray
    r: float
    done: bool


@dataclass(eq=False)
class TrajectoryBatch:
    """Struct-of-arrays view over consecutive step records.

    ``dones`` marks true terminal entries; ``truncated`` marks steps where the
    episode was cut by the horizon or by the end of the batch, which bootstrap
    from a value estimate instead of zero.
    """

    state_ids: np.ndarray
    state_vecs: np.ndarray
    belief_vecs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_state_ids: np.ndarray
    next_state_vecs: np.ndarray
    next_belief_vecs: np.ndarray
    dones: np.ndarray
    truncated: np.ndarray
    behavior_logp: np.ndarray
    expert_branch: np.ndarray
    episode_ids: np.ndarray
    episode_returns: tuple[float, ...] = field(default=())
    episode_lengths: tuple[int, ...] = field(default=())

    def __len__(self) -> int:
        return int(self.actions.shape[0])

    @property
    def episode_ends(self) -> np.ndarray:
        return self.dones | self.truncated

    @classmethod
    def empty(cls, state_dim: int, belief_dim: int) -> TrajectoryBatch:
        return cls(
            state_ids=np.zeros(0, dtype=int),
            state_vecs=np.zeros((0, state_dim)),
            belief_vecs=np.zeros((0, belief_dim)),
            actions=np.zeros(0, dtype=int),
            rewards=np.zeros(0),
            next_state_ids=np.zeros(0, dtype=int),
            next_state_vecs=np.zeros((0, state_dim)),
            next_belief_vecs=np.zeros((0, belief_dim)),
            dones=np.zeros(0, dtype=bool),
            truncated=np.zeros(0, dtype=bool),
            behavior_logp=np.zeros(0),
            expert_branch=np.zeros(0, dtype=bool),
            episode_ids=np.zeros(0, dtype=int),
        )

    @classmethod
    def concatenate(cls, batches: list[TrajectoryBatch]) -> TrajectoryBatch:
        if not batches:
            raise InvalidArgumentError("empty_concatenate", "need at least one batch")
        offset = 0
        episode_ids = []
        for batch in batches:
            episode_ids.append(batch.episode_ids + offset)
            if len(batch):
                offset += int(batch.episode_ids.max()) + 1

        def _cat(name: str) -> np.ndarray:
            return np.concatenate([getattr(batch, name) for batch in batches])

        return cls(
            state_ids=_cat("state_ids"),
            state_vecs=_cat("state_vecs"),
            belief_vecs=_cat("belief_vecs"),
            actions=_cat("actions"),
            rewards=_cat("rewards"),
            next_state_ids=_cat("next_state_ids"),
            next_state_vecs=_cat("next_state_vecs"),
            next_belief_vecs=_cat("next_belief_vecs"),
            dones=_cat("dones"),
            truncated=_cat("truncated"),
            behavior_logp=_cat("behavior_logp"),
            expert_branch=_cat("expert_branch"),
            episode_ids=np.concatenate(episode_ids),
            episode_returns=tuple(r for batch in batches for r in batch.episode_returns),
            episode_lengths=tuple(n for batch in batches for n in batch.episode_lengths),
        )


def require_non_terminal(pair: ProcessPair, s: int) -> None:
    if pair.is_terminal(s):
        raise PreconditionError("terminal_step", f"cannot step from terminal state {s}")
