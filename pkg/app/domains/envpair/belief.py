from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from app.core.errors import DimensionError, InvalidArgumentError


def belief_dim(obs_dim: int, window_size: int, num_actions: int) -> int:
    return window_size * obs_dim + (window_size - 1) * num_actions


@dataclass(frozen=True, eq=False)
class BeliefWindow:
    """The last ``w`` observations and ``w - 1`` actions, oldest first, zero-padded."""

    window_size: int
    obs_history: np.ndarray
    act_history: np.ndarray

    @property
    def obs_dim(self) -> int:
        return self.obs_history.shape[1]

    @property
    def num_actions(self) -> int:
        return self.act_history.shape[1]

    @property
    def vec(self) -> np.ndarray:
        return np.concatenate([self.obs_history.ravel(), self.act_history.ravel()])


def initial_belief(o0: np.ndarray, *, window_size: int = 1, num_actions: int = 4) -> BeliefWindow:
    if window_size < 1:
        raise InvalidArgumentError("window_size", "window size must be positive")
    o0 = np.asarray(o0, dtype=float)
    obs_history = np.zeros((window_size, o0.shape[0]))
    obs_history[-1] = o0
    return BeliefWindow(
        window_size=window_size,
        obs_history=obs_history,
        act_history=np.zeros((window_size - 1, num_actions)),
    )


def belief_update(b: BeliefWindow, o_next: np.ndarray, a: int) -> BeliefWindow:
    o_next = np.asarray(o_next, dtype=float)
    if o_next.shape != (b.obs_dim,):
        raise DimensionError("observation_shape", f"expected observation of length {b.obs_dim}, got {o_next.shape}")
    if not 0 <= a < b.num_actions:
        raise DimensionError("action_range", f"action {a} outside [0, {b.num_actions})")
    obs_history = np.vstack([b.obs_history[1:], o_next[None, :]])
    act_history = b.act_history
    if b.window_size > 1:
        onehot = np.zeros((1, b.num_actions))
        onehot[0, a] = 1.0
        act_history = np.vstack([b.act_history[1:], onehot])
    return BeliefWindow(window_size=b.window_size, obs_history=obs_history, act_history=act_history)
