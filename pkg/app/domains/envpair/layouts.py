from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass

import numpy as np

from app.core.errors import ConfigurationError
from app.domains.envpair.models import (
    ACTION_DELTAS,
    LAYOUTS,
    NUM_ACTIONS,
    Cell,
    GridLayout,
    PairSpec,
    ProcessPair,
)

logger = logging.getLogger(__name__)

_FROZEN_LAKE_START: Cell = (0, 2)
_FROZEN_LAKE_GOAL: Cell = (4, 2)
_FROZEN_LAKE_HAZARDS: tuple[Cell, ...] = tuple((x, y) for y in (1, 2, 3) for x in (1, 2, 3))


@dataclass(frozen=True)
class _TigerDoorGeometry:
    start: Cell
    free: frozenset[Cell]
    doors: tuple[Cell, Cell]
    buttons: frozenset[Cell] = frozenset()
    switches: frozenset[Cell] = frozenset()


_TIGER_DOORS: dict[int, _TigerDoorGeometry] = {
    0: _TigerDoorGeometry(
        start=(0, 4),
        free=frozenset({(0, 4), (1, 4), (2, 4), (3, 4), (4, 4), (4, 3), (4, 2), (0, 3)}),
        doors=((4, 1), (3, 2)),
        buttons=frozenset({(0, 3)}),
    ),
    1: _TigerDoorGeometry(
        start=(2, 4),
        free=frozenset({(2, 4)}),
        doors=((1, 4), (3, 4)),
        switches=frozenset({(2, 3)}),
    ),
    2: _TigerDoorGeometry(
        start=(2, 4),
        free=frozenset({(1, 4), (2, 4), (3, 4)}),
        doors=((0, 4), (4, 4)),
        switches=frozenset({(2, 3)}),
    ),
    3: _TigerDoorGeometry(
        start=(2, 4),
        free=frozenset({(0, 4), (1, 4), (2, 4), (3, 4), (4, 4)}),
        doors=((0, 3), (4, 3)),
        switches=frozenset({(2, 3)}),
    ),
}


@dataclass(frozen=True)
class _Configuration:
    label: str
    goals: frozenset[Cell]
    hazards: frozenset[Cell]
    state_block: tuple[float, ...]
    revealed_block: tuple[float, ...]


@dataclass(frozen=True)
class _GridProblem:
    spec: PairSpec
    start: Cell
    walls: frozenset[Cell]
    configurations: tuple[_Configuration, ...]
    buttons: frozenset[Cell]
    switches: frozenset[Cell]
    reveals: bool
    observe_state: bool


def make_pair(spec: PairSpec) -> ProcessPair:
    """Build the named gridworld pair with every reachable state enumerated."""
    if spec.layout not in LAYOUTS:
        raise ConfigurationError("unknown_layout", f"unknown layout {spec.layout!r}; expected one of {list(LAYOUTS)}")
    if spec.grid_size != 5:
        raise ConfigurationError("grid_size", "gridworld layouts are defined on a 5x5 grid")
    if spec.layout.startswith("frozen_lake"):
        problem = _frozen_lake(spec, observe_state=spec.layout == "frozen_lake_visible")
    else:
        problem = _tiger_door(spec, int(spec.layout.rsplit("_", 1)[1]))
    pair = _enumerate(problem)
    logger.debug("Built pair %s with %s states", pair.name, pair.num_states)
    return pair


def make_named_pair(name: str) -> ProcessPair:
    return make_pair(PairSpec(layout=name))


def _frozen_lake(spec: PairSpec, *, observe_state: bool) -> _GridProblem:
    configurations = []
    for index, hazard in enumerate(_FROZEN_LAKE_HAZARDS):
        block = tuple(1.0 if i == index else 0.0 for i in range(len(_FROZEN_LAKE_HAZARDS)))
        configurations.append(
            _Configuration(
                label=f"hazard={hazard[0]},{hazard[1]}",
                goals=frozenset({_FROZEN_LAKE_GOAL}),
                hazards=frozenset({hazard}),
                state_block=block,
                revealed_block=(),
            )
        )
    return _GridProblem(
        spec=spec,
        start=_FROZEN_LAKE_START,
        walls=frozenset(),
        configurations=tuple(configurations),
        buttons=frozenset(),
        switches=frozenset(),
        reveals=False,
        observe_state=observe_state,
    )


def _tiger_door(spec: PairSpec, variant: int) -> _GridProblem:
    geometry = _TIGER_DOORS[variant]
    open_cells = geometry.free | set(geometry.doors)
    walls = frozenset(
        (x, y) for x in range(spec.grid_size) for y in range(spec.grid_size) if (x, y) not in open_cells
    )
    configurations = []
    for index in range(2):
        goal, hazard = geometry.doors[index], geometry.doors[1 - index]
        goal_block = (1.0, 0.0) if index == 0 else (0.0, 1.0)
        hazard_block = goal_block[::-1]
        configurations.append(
            _Configuration(
                label=f"goal={goal[0]},{goal[1]}",
                goals=frozenset({goal}),
                hazards=frozenset({hazard}),
                state_block=goal_block + hazard_block,
                revealed_block=goal_block + hazard_block,
            )
        )
    return _GridProblem(
        spec=spec,
        start=geometry.start,
        walls=walls,
        configurations=tuple(configurations),
        buttons=geometry.buttons,
        switches=geometry.switches,
        reveals=True,
        observe_state=False,
    )


def _move(problem: _GridProblem, key: tuple[Cell, int, bool], action: int) -> tuple[tuple[Cell, int, bool] | None, float]:
    (x, y), config_index, revealed = key
    spec = problem.spec
    configuration = problem.configurations[config_index]
    dx, dy = ACTION_DELTAS[action]
    target = (x + dx, y + dy)
    inside = 0 <= target[0] < spec.grid_size and 0 <= target[1] < spec.grid_size
    if inside and target in problem.switches:
        return ((x, y), config_index, True), spec.step_reward
    if not inside or target in problem.walls:
        return key, spec.step_reward
    if target in configuration.goals:
        return None, spec.step_reward + spec.goal_reward
    if target in configuration.hazards:
        return None, spec.step_reward + spec.hazard_reward
    return (target, config_index, revealed or target in problem.buttons), spec.step_reward


def _enumerate(problem: _GridProblem) -> ProcessPair:
    spec = problem.spec
    initial = [(problem.start, index, False) for index in range(len(problem.configurations))]
    index_of: dict[tuple[Cell, int, bool], int] = {}
    queue: deque[tuple[Cell, int, bool]] = deque()
    for key in initial:
        index_of[key] = len(index_of)
        queue.append(key)
    edges: list[list[tuple[tuple[Cell, int, bool] | None, float]]] = []
    order: list[tuple[Cell, int, bool]] = []
    while queue:
        key = queue.popleft()
        order.append(key)
        outgoing = []
        for action in range(NUM_ACTIONS):
            successor, reward = _move(problem, key, action)
            if successor is not None and successor not in index_of:
                index_of[successor] = len(index_of)
                queue.append(successor)
            outgoing.append((successor, reward))
        edges.append(outgoing)

    num_states = len(order) + 1
    terminal_id = num_states - 1
    transitions = np.zeros((num_states, NUM_ACTIONS, num_states))
    rewards = np.zeros_like(transitions)
    for s, outgoing in enumerate(edges):
        for action, (successor, reward) in enumerate(outgoing):
            s_next = terminal_id if successor is None else index_of[successor]
            transitions[s, action, s_next] = 1.0
            rewards[s, action, s_next] = reward
    transitions[terminal_id, :, terminal_id] = 1.0

    init_dist = np.zeros(num_states)
    for key in initial:
        init_dist[index_of[key]] = 1.0 / len(initial)
    terminal = np.zeros(num_states, dtype=bool)
    terminal[terminal_id] = True

    cells = spec.grid_size * spec.grid_size
    state_rows, obs_rows, labels = [], [], []
    for (x, y), config_index, revealed in order:
        configuration = problem.configurations[config_index]
        agent = np.zeros(cells)
        agent[y * spec.grid_size + x] = 1.0
        state_row = np.concatenate([agent, configuration.state_block])
        if problem.reveals:
            state_row = np.append(state_row, 1.0 if revealed else 0.0)
            shown = configuration.revealed_block if revealed else (0.0,) * len(configuration.revealed_block)
            obs_row = np.concatenate([agent, shown])
        else:
            obs_row = agent
        state_rows.append(state_row)
        obs_rows.append(state_row if problem.observe_state else obs_row)
        labels.append(f"({x},{y}) {configuration.label}{' revealed' if revealed else ''}")
    state_vecs = np.vstack([*state_rows, np.zeros(len(state_rows[0]))])
    obs_vecs = np.vstack([*obs_rows, np.zeros(len(obs_rows[0]))])
    labels.append("terminal")

    goal_cells = frozenset(cell for configuration in problem.configurations for cell in configuration.goals)
    hazard_cells = frozenset(cell for configuration in problem.configurations for cell in configuration.hazards)
    detour = 0.0
    if problem.buttons:
        detour = -2.0 * spec.step_reward
    elif problem.switches:
        detour = -spec.step_reward
    grid = GridLayout(
        width=spec.grid_size,
        height=spec.grid_size,
        start=problem.start,
        walls=problem.walls,
        goal_cells=goal_cells,
        hazard_cells=hazard_cells,
        buttons=problem.buttons,
        switches=problem.switches,
        button_detour_cost=detour,
    )
    return ProcessPair(
        name=spec.layout,
        transitions=transitions,
        rewards=rewards,
        init_dist=init_dist,
        terminal=terminal,
        state_vecs=state_vecs,
        obs_vecs=obs_vecs,
        gamma=spec.gamma,
        horizon=spec.horizon,
        labels=tuple(labels),
        grid=grid,
        spec=spec,
    )


def build_tabular_pair(
    *,
    transitions: np.ndarray,
    rewards: np.ndarray,
    init_dist: np.ndarray,
    terminal: np.ndarray,
    obs_vecs: np.ndarray,
    state_vecs: np.ndarray | None = None,
    gamma: float = 0.995,
    horizon: int = 200,
    name: str = "tabular",
) -> ProcessPair:
    """Wrap explicit matrices as a pair; state vectors default to one-hot ids."""
    num_states = np.asarray(transitions).shape[0]
    if state_vecs is None:
        state_vecs = np.eye(num_states)
        state_vecs[np.asarray(terminal, dtype=bool)] = 0.0
    return ProcessPair(
        name=name,
        transitions=transitions,
        rewards=rewards,
        init_dist=init_dist,
        terminal=terminal,
        state_vecs=state_vecs,
        obs_vecs=obs_vecs,
        gamma=gamma,
        horizon=horizon,
    )


def render_ascii(pair: ProcessPair) -> str:
    if pair.grid is None:
        return f"{pair.name}: no grid geometry ({pair.num_states} states)"
    grid = pair.grid
    rows = []
    for y in range(grid.height):
        row = []
        for x in range(grid.width):
            cell = (x, y)
            if cell == grid.start:
                row.append("S")
            elif cell in grid.walls:
                row.append("#")
            elif cell in grid.goal_cells and cell in grid.hazard_cells:
                row.append("?")
            elif cell in grid.goal_cells:
                row.append("G")
            elif cell in grid.hazard_cells:
                row.append("h")
            elif cell in grid.buttons:
                row.append("B")
            else:
                row.append(".")
        rows.append("".join(row))
    # Switches are solid cells, so they overwrite the wall glyph.
    for x, y in grid.switches:
        rows[y] = rows[y][:x] + "P" + rows[y][x + 1 :]
    legend = "S start, G goal, h possible hazard, ? door (goal or hazard), B button, P wall switch, # wall"
    return "\n".join([*rows, legend])


def describe_states(pair: ProcessPair) -> list[dict[str, object]]:
    return [
        {
            "id": s,
            "label": pair.labels[s],
            "terminal": bool(pair.terminal[s]),
            "initial_mass": float(pair.init_dist[s]),
        }
        for s in pair.enumerate_states()
    ]
