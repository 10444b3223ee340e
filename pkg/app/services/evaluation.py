from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from app.core.errors import InvalidArgumentError, UnsupportedPairError
from app.domains.envpair.belief import belief_update, initial_belief
from app.domains.envpair.models import ProcessPair
from app.domains.envpair.sampling import ActionSource, step
from app.domains.oracle.solvers import optimal_mdp_policy, optimal_pomdp_policy
from app.domains.training.schemas import RunConfig
from app.ml.nets import MlpNet
from app.observability.metrics import deterministic_return as deterministic_return_gauge

logger = logging.getLogger(__name__)

OPTIMUM_TOLERANCE = 1e-6


@dataclass(frozen=True)
class EvaluationResult:
    stochastic_return_mean: float | None
    stochastic_return_std: float | None
    deterministic_return: float
    episodes: int
    interactions: int

    def record_fields(self) -> dict[str, float | None]:
        return {
            "stochastic_return_mean": self.stochastic_return_mean,
            "stochastic_return_std": self.stochastic_return_std,
            "deterministic_return": self.deterministic_return,
        }


def run_episode(
    pair: ProcessPair,
    policy: ActionSource,
    rng: np.random.Generator,
    *,
    window: int = 1,
    start_state: int | None = None,
    greedy: bool = False,
) -> tuple[float, int]:
    """Undiscounted return and length of one episode capped at the pair horizon."""
    s = int(rng.choice(pair.num_states, p=pair.init_dist)) if start_state is None else start_state
    belief = initial_belief(pair.observe(s), window_size=window, num_actions=pair.num_actions)
    total = 0.0
    for t in range(pair.horizon):
        probs = policy.action_probs(np.array([s]), pair.state_vecs[s][None, :], belief.vec[None, :])[0]
        action = int(np.argmax(probs)) if greedy else int(rng.choice(probs.shape[0], p=probs))
        outcome = step(pair, s, action, rng)
        total += outcome.r
        if outcome.done:
            return total, t + 1
        s, belief = outcome.s_next, belief_update(belief, outcome.o_next, action)
    return total, pair.horizon


def deterministic_return(
    policy: ActionSource, pair: ProcessPair, *, window: int = 1, rng: np.random.Generator | None = None
) -> float:
    """Argmax-action return averaged exactly over every initial state."""
    rng = rng or np.random.default_rng(0)
    total = 0.0
    for s0 in pair.initial_states:
        episode_return, _ = run_episode(pair, policy, rng, window=window, start_state=int(s0), greedy=True)
        total += float(pair.init_dist[s0]) * episode_return
    return total


def evaluate(
    policy: ActionSource,
    pair: ProcessPair,
    n_interactions: int,
    rng: np.random.Generator,
    *,
    window: int = 1,
) -> EvaluationResult:
    """Stochastic episodes until at least ``n_interactions`` steps, plus the exact deterministic return."""
    if n_interactions < 0:
        raise InvalidArgumentError("n_interactions", "n_interactions must be non-negative")
    returns: list[float] = []
    interactions = 0
    while interactions < n_interactions:
        episode_return, length = run_episode(pair, policy, rng, window=window)
        returns.append(episode_return)
        interactions += length
    greedy = deterministic_return(policy, pair, window=window, rng=rng)
    mean = float(np.mean(returns)) if returns else None
    std = float(np.std(returns)) if returns else None
    return EvaluationResult(
        stochastic_return_mean=mean,
        stochastic_return_std=std,
        deterministic_return=greedy,
        episodes=len(returns),
        interactions=interactions,
    )


def expert_return_probe(expert: ActionSource, pair: ProcessPair, *, window: int = 1) -> float:
    return deterministic_return(expert, pair, window=window)


def optimum_target(pair: ProcessPair, method: str, *, window: int = 1) -> float | None:
    """Oracle optimum a run may stop at: the MDP optimum for ``rl_mdp``, the POMDP optimum otherwise."""
    try:
        if method == "rl_mdp":
            return optimal_mdp_policy(pair)[1]
        return optimal_pomdp_policy(pair, window=window)[1]
    except UnsupportedPairError as exc:
        logger.warning("No oracle optimum for %s, early stopping disabled: %s", pair.name, exc.detail)
        return None


@dataclass
class EvaluationTracker:
    """Evaluation cadence, best-parameter bookkeeping and early stopping at the oracle optimum."""

    eval_every: int
    patience: int
    target: float | None
    nets: dict[str, MlpNet]
    method: str = ""
    env: str = ""
    best_return: float | None = None
    best_iteration: int | None = None
    best_params: dict[str, np.ndarray] = field(default_factory=dict)
    hits: int = 0

    @classmethod
    def for_run(cls, pair: ProcessPair, cfg: RunConfig, *, nets: dict[str, MlpNet]) -> EvaluationTracker:
        target = optimum_target(pair, cfg.method, window=cfg.window) if cfg.early_stop_evals > 0 else None
        return cls(
            eval_every=cfg.eval_every,
            patience=cfg.early_stop_evals,
            target=target,
            nets=nets,
            method=cfg.method,
            env=cfg.env,
        )

    def due(self, iteration: int, total: int) -> bool:
        return (iteration + 1) % self.eval_every == 0 or iteration == total - 1

    def observe(self, iteration: int, value: float) -> bool:
        """Record an evaluation; True once the optimum has held for ``patience`` evaluations."""
        deterministic_return_gauge.labels(method=self.method, env=self.env).set(value)
        if self.best_return is None or value > self.best_return:
            self.best_return = value
            self.best_iteration = iteration
            self.best_params = {name: net.get_flat() for name, net in self.nets.items()}
        logger.info("Evaluation at iteration %s: deterministic return %.4f (best %.4f)", iteration, value, self.best_return)
        if self.target is None:
            return False
        self.hits = self.hits + 1 if abs(value - self.target) <= OPTIMUM_TOLERANCE else 0
        return self.patience > 0 and self.hits >= self.patience

    def restore_best(self) -> None:
        for name, params in self.best_params.items():
            self.nets[name].set_flat(params)

    def best_copy(self, name: str) -> MlpNet | None:
        """A separate copy of one net at its best evaluated parameters; the live net is untouched."""
        if name not in self.best_params:
            return None
        net = copy.deepcopy(self.nets[name])
        net.set_flat(self.best_params[name])
        return net

    def to_dict(self) -> dict[str, Any]:
        return {
            "best_return": self.best_return,
            "best_iteration": self.best_iteration,
            "hits": self.hits,
            "best_params": {name: params.tolist() for name, params in self.best_params.items()},
        }

    def load(self, payload: dict[str, Any]) -> None:
        self.best_return = payload.get("best_return")
        self.best_iteration = payload.get("best_iteration")
        self.hits = int(payload.get("hits", 0))
        self.best_params = {
            name: np.asarray(params, dtype=float) for name, params in payload.get("best_params", {}).items() if name in self.nets
        }
