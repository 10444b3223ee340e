from __future__ import annotations

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass
from typing import Literal

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field
from torch import Tensor
from torch.nn.utils import parameters_to_vector, vector_to_parameters

from app.core.errors import DimensionError, InvalidArgumentError, NonFiniteError
from app.domains.envpair.models import TrajectoryBatch
from app.ml.estimators import discounted_returns
from app.ml.nets import DTYPE, CategoricalPolicyNet, QNet, ValueNet, flatten_grads
from app.ml.optim import DEFAULT_L2, fit_regression
from app.observability.metrics import trpo_steps_total

logger = logging.getLogger(__name__)

VALUE_LR = 7e-4
Q_LR = 3e-4
FIT_EPOCHS = 25
FIT_MINIBATCHES = 32
KL_SLACK = 1e-6
_ZERO_GRADIENT = 1e-12


class TrustRegionConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    max_kl: float = Field(default=0.01, gt=0)
    cg_iters: int = Field(default=10, ge=1)
    cg_damping: float = Field(default=0.1, ge=0)
    backtrack_ratio: float = Field(default=0.5, gt=0, lt=1)
    max_backtracks: int = Field(default=10, ge=1)
    fisher_fraction: float = Field(default=1.0, gt=0, le=1)


@dataclass(frozen=True, eq=False)
class PolicyBatch:
    """Inputs, taken actions, advantages and the log-probs the actions were sampled with."""

    inputs: np.ndarray
    actions: np.ndarray
    advantages: np.ndarray
    old_logp: np.ndarray

    def __post_init__(self) -> None:
        size = self.inputs.shape[0]
        if not (self.actions.shape[0] == self.advantages.shape[0] == self.old_logp.shape[0] == size):
            raise DimensionError("policy_batch", "policy batch arrays differ in length")

    def __len__(self) -> int:
        return int(self.inputs.shape[0])


@dataclass(frozen=True)
class TrpoReport:
    status: Literal["accepted", "rejected", "zero_gradient"]
    kl: float
    surrogate_before: float
    surrogate_after: float
    backtracks: int
    fallback: bool = False

    @property
    def accepted(self) -> bool:
        return self.status == "accepted"

    @property
    def improvement(self) -> float:
        return self.surrogate_after - self.surrogate_before


def _tensors(policy: CategoricalPolicyNet, batch: PolicyBatch) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    inputs = policy.as_tensor(batch.inputs)
    actions = torch.as_tensor(np.asarray(batch.actions, dtype=int))
    advantages = torch.as_tensor(np.asarray(batch.advantages, dtype=float), dtype=DTYPE)
    old_logp = torch.as_tensor(np.asarray(batch.old_logp, dtype=float), dtype=DTYPE)
    return inputs, actions, advantages, old_logp


def _surrogate(
    policy: CategoricalPolicyNet,
    inputs: Tensor,
    actions: Tensor,
    advantages: Tensor,
    old_logp: Tensor,
    entropy_coef: float = 0.0,
) -> Tensor:
    log_probs = policy.log_probs(inputs).gather(1, actions[:, None]).squeeze(1)
    value = torch.mean(torch.exp(log_probs - old_logp) * advantages)
    if entropy_coef:
        value = value + entropy_coef * policy.entropy_tensor(inputs).mean()
    return value


def surrogate_loss(
    policy: CategoricalPolicyNet, batch: PolicyBatch, *, entropy_coef: float = 0.0
) -> tuple[float, np.ndarray]:
    """Importance-ratio surrogate mean(exp(log pi - old_logp) * A), plus an optional entropy bonus, and its flat gradient."""
    if len(batch) == 0:
        raise InvalidArgumentError("empty_batch", "surrogate needs at least one sample")
    params = list(policy.parameters())
    value = _surrogate(policy, *_tensors(policy, batch), entropy_coef)
    if not torch.isfinite(value):
        raise NonFiniteError("non_finite_surrogate", "surrogate loss is not finite")
    return float(value), flatten_grads(torch.autograd.grad(value, params), params).numpy()


def categorical_kl_tensor(old_log_probs: Tensor, new_log_probs: Tensor) -> Tensor:
    return (torch.exp(old_log_probs) * (old_log_probs - new_log_probs)).sum(dim=-1)


def mean_kl(policy_old: CategoricalPolicyNet, policy_new: CategoricalPolicyNet, inputs: np.ndarray) -> float:
    with torch.no_grad():
        old = policy_old.log_probs(policy_old.as_tensor(inputs))
        new = policy_new.log_probs(policy_new.as_tensor(inputs))
        return float(categorical_kl_tensor(old, new).mean())


def fisher_vector_product(policy: CategoricalPolicyNet, inputs: Tensor, vector: Tensor, damping: float) -> Tensor:
    """Hessian of the mean KL to the current (frozen) distribution times ``vector``, plus damping."""
    params = list(policy.parameters())
    log_probs = policy.log_probs(inputs)
    kl = categorical_kl_tensor(log_probs.detach(), log_probs).mean()
    grads = torch.autograd.grad(kl, params, create_graph=True)
    flat = torch.cat([grad.reshape(-1) for grad in grads])
    hessian_vector = torch.autograd.grad(flat @ vector, params)
    return flatten_grads(hessian_vector, params).detach() + damping * vector


def conjugate_gradient(
    matvec: Callable[[Tensor], Tensor], b: Tensor, iters: int, residual_tol: float = 1e-10
) -> tuple[Tensor, bool]:
    """Approximately solve ``A x = b``; the flag is False when non-positive curvature stopped the solve."""
    x = torch.zeros_like(b)
    r = b.clone()
    p = b.clone()
    rr = r @ r
    for _ in range(iters):
        ap = matvec(p)
        curvature = p @ ap
        if not torch.isfinite(curvature) or curvature <= 0:
            return x, False
        alpha = rr / curvature
        x = x + alpha * p
        r = r - alpha * ap
        rr_next = r @ r
        if rr_next < residual_tol:
            break
        p = r + (rr_next / rr) * p
        rr = rr_next
    return x, True


def _record(report: TrpoReport) -> TrpoReport:
    trpo_steps_total.labels(result="accepted" if report.accepted else "rejected").inc()
    if report.fallback:
        trpo_steps_total.labels(result="fallback").inc()
    return report


def trpo_step(
    policy: CategoricalPolicyNet,
    batch: PolicyBatch,
    cfg: TrustRegionConfig | None = None,
    rng: np.random.Generator | None = None,
    *,
    entropy_coef: float = 0.0,
) -> TrpoReport:
    """One natural-gradient step with a KL-constrained backtracking line search.

    ``entropy_coef`` adds the mean policy entropy to the surrogate. The policy is
    modified in place only when a step is accepted.
    """
    cfg = cfg or TrustRegionConfig()
    if len(batch) == 0:
        raise InvalidArgumentError("empty_batch", "trust-region step needs at least one sample")
    params = list(policy.parameters())
    inputs, actions, advantages, old_logp = _tensors(policy, batch)
    start = parameters_to_vector(params).detach().clone()
    with torch.no_grad():
        reference = policy.log_probs(inputs)

    surrogate = _surrogate(policy, inputs, actions, advantages, old_logp, entropy_coef)
    before = float(surrogate)
    if not math.isfinite(before):
        raise NonFiniteError("non_finite_surrogate", "surrogate loss is not finite")
    grad = flatten_grads(torch.autograd.grad(surrogate, params), params).detach()
    if float(grad.norm()) <= _ZERO_GRADIENT:
        return _record(TrpoReport("zero_gradient", 0.0, before, before, 0))

    fisher_inputs = inputs
    if cfg.fisher_fraction < 1.0 and rng is not None:
        count = max(1, int(round(cfg.fisher_fraction * len(batch))))
        fisher_inputs = inputs[torch.as_tensor(rng.choice(len(batch), size=count, replace=False))]

    def matvec(vector: Tensor) -> Tensor:
        return fisher_vector_product(policy, fisher_inputs, vector, cfg.cg_damping)

    direction, solved = conjugate_gradient(matvec, grad, cfg.cg_iters)
    fallback = not solved or not bool(torch.isfinite(direction).all()) or float(direction @ grad) <= 0
    if fallback:
        logger.warning("Conjugate gradient broke down; falling back to the plain gradient direction")
        direction = grad
    curvature = float(direction @ matvec(direction))
    if not math.isfinite(curvature) or curvature <= 0:
        logger.warning("Trust-region step rejected: non-positive curvature along the search direction")
        return _record(TrpoReport("rejected", 0.0, before, before, 0, fallback=fallback))
    full_step = direction * math.sqrt(2.0 * cfg.max_kl / curvature)

    kl = 0.0
    for backtrack in range(cfg.max_backtracks):
        fraction = cfg.backtrack_ratio**backtrack
        with torch.no_grad():
            vector_to_parameters(start + fraction * full_step, params)
            kl = float(categorical_kl_tensor(reference, policy.log_probs(inputs)).mean())
            after = float(_surrogate(policy, inputs, actions, advantages, old_logp, entropy_coef))
        if math.isfinite(after) and after > before and kl <= cfg.max_kl:
            logger.debug("Trust-region step accepted after %s backtracks (kl=%.5f)", backtrack, kl)
            return _record(TrpoReport("accepted", kl, before, after, backtrack, fallback=fallback))
    with torch.no_grad():
        vector_to_parameters(start, params)
    logger.warning("Trust-region line search failed after %s backtracks", cfg.max_backtracks)
    return _record(TrpoReport("rejected", kl, before, before, cfg.max_backtracks, fallback=fallback))


def fit_value(
    net: ValueNet,
    batch: TrajectoryBatch,
    gamma: float,
    *,
    rng: np.random.Generator,
    optimizer: torch.optim.Optimizer | None = None,
    lr: float = VALUE_LR,
    epochs: int = FIT_EPOCHS,
    minibatches: int = FIT_MINIBATCHES,
    l2: float = DEFAULT_L2,
) -> list[float]:
    """Regress V onto discounted reward-to-go; truncated episodes bootstrap from the current V."""
    if len(batch) == 0:
        raise InvalidArgumentError("empty_dataset", "cannot fit a value function without data")
    inputs = net.select_inputs(batch.state_vecs, batch.belief_vecs)
    bootstrap = net.predict(net.select_inputs(batch.next_state_vecs, batch.next_belief_vecs))
    targets = discounted_returns(batch, gamma, bootstrap=bootstrap)
    return fit_regression(
        net, inputs, targets, epochs=epochs, minibatches=minibatches, lr=lr, rng=rng, l2=l2, optimizer=optimizer
    )


def fit_q(
    net: QNet,
    batch: TrajectoryBatch,
    gamma: float,
    *,
    rng: np.random.Generator,
    bootstrap: np.ndarray | None = None,
    optimizer: torch.optim.Optimizer | None = None,
    lr: float = Q_LR,
    epochs: int = FIT_EPOCHS,
    minibatches: int = FIT_MINIBATCHES,
    l2: float = DEFAULT_L2,
) -> list[float]:
    """Regress Q(x, a) onto the reward-to-go from (x, a) onward."""
    if len(batch) == 0:
        raise InvalidArgumentError("empty_dataset", "cannot fit a Q function without data")
    features = net.features(net.select_inputs(batch.state_vecs, batch.belief_vecs), batch.actions)
    targets = discounted_returns(batch, gamma, bootstrap=bootstrap)
    return fit_regression(
        net, features, targets, epochs=epochs, minibatches=minibatches, lr=lr, rng=rng, l2=l2, optimizer=optimizer
    )
