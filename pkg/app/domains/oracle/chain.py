from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from app.core.errors import InvalidArgumentError
from app.domains.envpair.belief import BeliefWindow, belief_update, initial_belief
from app.domains.envpair.models import ProcessPair

_TERMINAL_KEY = "terminal"


@dataclass(frozen=True, eq=False)
class JointChain:
    """Reachable (state, belief) nodes of a pair under a fixed belief window.

    Every terminal state collapses onto one absorbing node whose belief is the
    dedicated terminal belief (the last belief id). Successors are stored as
    padded ``(N, A, K)`` arrays so solvers never need an ``N x A x N`` tensor.
    """

    pair: ProcessPair
    window: int
    node_state: np.ndarray
    node_belief: np.ndarray
    belief_vecs: np.ndarray
    succ: np.ndarray
    prob: np.ndarray
    reward: np.ndarray
    init: np.ndarray
    terminal_node: int
    terminal_belief: int
    belief_index: dict[bytes, int]

    @property
    def num_nodes(self) -> int:
        return self.node_state.shape[0]

    @property
    def num_beliefs(self) -> int:
        return self.belief_vecs.shape[0]

    @property
    def num_actions(self) -> int:
        return self.succ.shape[1]

    @property
    def nonterminal(self) -> np.ndarray:
        mask = np.ones(self.num_nodes, dtype=bool)
        mask[self.terminal_node] = False
        return mask

    def lookup_beliefs(self, belief_vecs: np.ndarray) -> np.ndarray:
        """Belief ids for raw vectors; unknown vectors map to -1."""
        rows = np.atleast_2d(np.asarray(belief_vecs, dtype=float))
        return np.array([self.belief_index.get(row.tobytes(), -1) for row in rows], dtype=int)

    def states_per_belief(self) -> np.ndarray:
        counts = np.zeros(self.num_beliefs, dtype=int)
        seen = set()
        for s, b in zip(self.node_state[self.nonterminal], self.node_belief[self.nonterminal], strict=True):
            if (s, b) not in seen:
                seen.add((s, b))
                counts[b] += 1
        return counts

    def transition_matrix(self, node_policy: np.ndarray) -> np.ndarray:
        """Dense node-to-node matrix under per-node action probabilities."""
        matrix = np.zeros((self.num_nodes, self.num_nodes))
        weights = node_policy[:, :, None] * self.prob
        rows = np.broadcast_to(np.arange(self.num_nodes)[:, None, None], self.succ.shape)
        np.add.at(matrix, (rows.ravel(), self.succ.ravel()), weights.ravel())
        return matrix

    def propagate(self, dist: np.ndarray, node_policy: np.ndarray) -> np.ndarray:
        out = np.zeros(self.num_nodes)
        np.add.at(out, self.succ.ravel(), (dist[:, None, None] * node_policy[:, :, None] * self.prob).ravel())
        return out

    def expected_rewards(self, node_policy: np.ndarray) -> np.ndarray:
        return (node_policy * (self.prob * self.reward).sum(axis=2)).sum(axis=1)


def _key(s: int, belief: BeliefWindow) -> tuple[int, bytes]:
    return s, belief.vec.tobytes()


@lru_cache(maxsize=32)
def build_chain(pair: ProcessPair, window: int = 1) -> JointChain:
    if window < 1:
        raise InvalidArgumentError("window_size", "window size must be positive")
    num_actions = pair.num_actions
    index_of: dict[object, int] = {}
    windows: list[BeliefWindow | None] = []
    states: list[int] = []
    belief_index: dict[bytes, int] = {}
    node_belief: list[int] = []
    queue: deque[int] = deque()

    def _node(s: int, belief: BeliefWindow) -> int:
        key = _key(s, belief)
        if key not in index_of:
            index_of[key] = len(states)
            states.append(s)
            windows.append(belief)
            node_belief.append(belief_index.setdefault(key[1], len(belief_index)))
            queue.append(index_of[key])
        return index_of[key]

    init_mass: dict[int, float] = {}
    for s0 in pair.initial_states:
        node = _node(int(s0), initial_belief(pair.observe(s0), window_size=window, num_actions=num_actions))
        init_mass[node] = init_mass.get(node, 0.0) + float(pair.init_dist[s0])

    edges: dict[int, list[dict[object, tuple[float, float]]]] = {}
    while queue:
        node = queue.popleft()
        s, belief = states[node], windows[node]
        outgoing = []
        for a in range(num_actions):
            successors: dict[object, tuple[float, float]] = {}
            for s_next in np.flatnonzero(pair.transitions[s, a]):
                p = float(pair.transitions[s, a, s_next])
                r = float(pair.rewards[s, a, s_next])
                if pair.terminal[s_next]:
                    target: object = _TERMINAL_KEY
                else:
                    target = _node(int(s_next), belief_update(belief, pair.observe(s_next), a))
                # Rewards of merged successors are probability-weighted.
                mass, reward = successors.get(target, (0.0, 0.0))
                successors[target] = (mass + p, reward + p * r)
            outgoing.append(successors)
        edges[node] = outgoing

    terminal_node = len(states)
    terminal_belief = len(belief_index)
    terminal_state = int(np.flatnonzero(pair.terminal)[0]) if pair.terminal.any() else -1
    num_nodes = terminal_node + 1
    width = max((len(successors) for outgoing in edges.values() for successors in outgoing), default=1)
    succ = np.full((num_nodes, num_actions, width), terminal_node, dtype=int)
    prob = np.zeros((num_nodes, num_actions, width))
    reward = np.zeros((num_nodes, num_actions, width))
    for node, outgoing in edges.items():
        for a, successors in enumerate(outgoing):
            for k, (target, (mass, weighted)) in enumerate(successors.items()):
                succ[node, a, k] = terminal_node if target == _TERMINAL_KEY else target
                prob[node, a, k] = mass
                reward[node, a, k] = weighted / mass
    prob[terminal_node, :, 0] = 1.0

    belief_vecs = np.zeros((terminal_belief + 1, windows[0].vec.shape[0] if windows else 0))
    for node, belief in enumerate(windows):
        belief_vecs[node_belief[node]] = belief.vec
    init = np.zeros(num_nodes)
    for node, mass in init_mass.items():
        init[node] = mass
    for array in (succ, prob, reward, init, belief_vecs):
        array.setflags(write=False)
    return JointChain(
        pair=pair,
        window=window,
        node_state=np.array([*states, terminal_state], dtype=int),
        node_belief=np.array([*node_belief, terminal_belief], dtype=int),
        belief_vecs=belief_vecs,
        succ=succ,
        prob=prob,
        reward=reward,
        init=init,
        terminal_node=terminal_node,
        terminal_belief=terminal_belief,
        belief_index=belief_index,
    )


def reachability_weights(chain: JointChain) -> np.ndarray:
    """Initial mass of every start node that can reach each node under some action sequence."""
    weights = np.zeros(chain.num_nodes)
    for start in np.flatnonzero(chain.init > 0):
        seen = np.zeros(chain.num_nodes, dtype=bool)
        seen[start] = True
        frontier = [int(start)]
        while frontier:
            node = frontier.pop()
            for target in chain.succ[node][chain.prob[node] > 0]:
                if not seen[target]:
                    seen[target] = True
                    frontier.append(int(target))
        weights[seen] += chain.init[start]
    weights[chain.terminal_node] = 0.0
    return weights
