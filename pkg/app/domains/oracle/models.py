from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Literal

import numpy as np

from app.core.errors import DimensionError, InvalidArgumentError
from app.core.numerics import ROW_SUM_TOLERANCE
from app.domains.oracle.chain import JointChain

PolicyDomain = Literal["state", "belief"]
ValueDomain = Literal["state", "belief", "joint"]

TIE_TOLERANCE = 1e-9


def greedy_rows(values: np.ndarray, tolerance: float = TIE_TOLERANCE) -> np.ndarray:
    """Deterministic rows picking the lowest action index within ``tolerance`` of the best."""
    best = values.max(axis=1, keepdims=True)
    choice = np.argmax(values >= best - tolerance, axis=1)
    rows = np.zeros_like(values, dtype=float)
    rows[np.arange(values.shape[0]), choice] = 1.0
    return rows


@dataclass(frozen=True, eq=False)
class TabularPolicy:
    """Row-stochastic action matrix over pair states or chain beliefs."""

    domain: PolicyDomain
    probs: np.ndarray
    chain: JointChain | None = None

    def __post_init__(self) -> None:
        probs = np.array(self.probs, dtype=float)
        if probs.ndim != 2:
            raise DimensionError("policy_shape", f"policy matrix must be 2-D, got {probs.shape}")
        if np.any(probs < 0) or np.max(np.abs(probs.sum(axis=1) - 1.0)) > ROW_SUM_TOLERANCE:
            raise InvalidArgumentError("policy_rows", "policy rows must be distributions")
        if self.domain == "belief":
            if self.chain is None:
                raise InvalidArgumentError("policy_chain", "belief policies need the chain that numbers beliefs")
            if probs.shape[0] != self.chain.num_beliefs:
                raise DimensionError("policy_shape", f"expected {self.chain.num_beliefs} belief rows")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @classmethod
    def uniform(cls, domain: PolicyDomain, rows: int, num_actions: int, chain: JointChain | None = None) -> TabularPolicy:
        return cls(domain=domain, probs=np.full((rows, num_actions), 1.0 / num_actions), chain=chain)

    @property
    def num_actions(self) -> int:
        return self.probs.shape[1]

    def argmax(self) -> TabularPolicy:
        return TabularPolicy(domain=self.domain, probs=greedy_rows(self.probs), chain=self.chain)

    def node_probs(self, chain: JointChain) -> np.ndarray:
        index = chain.node_state if self.domain == "state" else chain.node_belief
        if self.domain == "state" and self.probs.shape[0] != chain.pair.num_states:
            raise DimensionError("policy_shape", f"expected {chain.pair.num_states} state rows")
        return self.probs[index]

    def action_probs(self, state_ids: np.ndarray, state_vecs: np.ndarray, belief_vecs: np.ndarray) -> np.ndarray:
        if self.domain == "state":
            return self.probs[np.asarray(state_ids, dtype=int)]
        ids = self.chain.lookup_beliefs(belief_vecs)
        uniform = np.full(self.num_actions, 1.0 / self.num_actions)
        return np.array([self.probs[i] if i >= 0 else uniform for i in ids])


@dataclass(frozen=True, eq=False)
class MixturePolicy:
    beta: float
    expert: TabularPolicy
    trainee: TabularPolicy

    def __post_init__(self) -> None:
        if not 0.0 <= self.beta <= 1.0:
            raise InvalidArgumentError("beta_range", "beta must lie in [0, 1]")

    def node_probs(self, chain: JointChain) -> np.ndarray:
        return self.beta * self.expert.node_probs(chain) + (1.0 - self.beta) * self.trainee.node_probs(chain)


ChainPolicy = TabularPolicy | MixturePolicy


@dataclass(frozen=True, eq=False)
class OccupancyTable:
    """Normalized discounted visitation mass over chain nodes."""

    chain: JointChain
    mass: np.ndarray
    truncation_error: float
    method: Literal["solve", "series"]

    @property
    def total_mass(self) -> float:
        return float(self.mass.sum())

    def state_marginal(self) -> np.ndarray:
        states = np.where(self.chain.node_state >= 0, self.chain.node_state, 0)
        return np.bincount(states, weights=self.mass, minlength=self.chain.pair.num_states)

    def belief_marginal(self) -> np.ndarray:
        return np.bincount(self.chain.node_belief, weights=self.mass, minlength=self.chain.num_beliefs)

    def posterior(self) -> np.ndarray:
        """d(s|b) per node; nodes in zero-mass beliefs get zero."""
        belief_mass = self.belief_marginal()[self.chain.node_belief]
        return np.divide(self.mass, belief_mass, out=np.zeros_like(self.mass), where=belief_mass > 0)

    def as_records(self) -> list[dict[str, Any]]:
        return [
            {"state": int(s), "belief": int(b), "mass": float(m)}
            for s, b, m in zip(self.chain.node_state, self.chain.node_belief, self.mass, strict=True)
            if m > 0
        ]


@dataclass(frozen=True, eq=False)
class ValueTable:
    domain: ValueDomain
    V: np.ndarray
    Q: np.ndarray
    chain: JointChain | None = None


@dataclass(frozen=True, eq=False)
class ImplicitPolicy:
    policy: TabularPolicy
    expert: TabularPolicy
    occupancy: OccupancyTable
    zero_mass: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


@dataclass(frozen=True, eq=False)
class FixedPointReport:
    trainee: TabularPolicy
    iterations: int
    residual: float
    converged: bool
    stochastic_return: float
    deterministic_return: float


@dataclass(frozen=True)
class IdentifiabilityReport:
    identifiable: bool
    divergence: float
    expert_return: float
    fixed_point_return: float
    fixed_point_deterministic_return: float
    pomdp_optimum: float
    return_gap: float
    fixed_point_converged: bool

    def to_dict(self) -> dict[str, Any]:
        return {key: getattr(self, key) for key in self.__dataclass_fields__}


@dataclass(frozen=True, eq=False)
class SurrogateBoundReport:
    """Both sides weighted by the trainee occupancy, plus the undiscounted returns of their maximizers."""

    lhs: float
    rhs: float
    holds: bool
    exhaustive: bool
    candidates_checked: int
    surrogate_expert_return: float
    best_expert_return: float
    best_expert: TabularPolicy | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "lhs": self.lhs,
            "rhs": self.rhs,
            "holds": self.holds,
            "exhaustive": self.exhaustive,
            "candidates_checked": self.candidates_checked,
            "surrogate_expert_return": self.surrogate_expert_return,
            "best_expert_return": self.best_expert_return,
        }


@dataclass(frozen=True, eq=False)
class ExpertSearch:
    expert: TabularPolicy
    value: float
    exhaustive: bool
    evaluations: int


@dataclass(frozen=True, eq=False)
class ExactA2dReport:
    trainee: TabularPolicy
    expert: TabularPolicy
    iterations: int
    converged: bool
    returns: tuple[float, ...]
    objectives: tuple[float, ...] = ()
    exhaustive: bool = True
    evaluations: int = 0

    @property
    def final_return(self) -> float:
        return self.returns[-1]
