from __future__ import annotations

import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np
import torch
from torch import Tensor, nn

from app.core.errors import CheckpointError, InvalidArgumentError
from app.ml.nets import DTYPE
from app.observability.metrics import optimizer_rejected_steps_total

logger = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
DEFAULT_L2 = 1e-3


@dataclass(frozen=True)
class OptimizerStep:
    accepted: bool
    grad_norm: float
    reason: str = ""


def make_adam(params: Iterable[nn.Parameter], *, lr: float, l2: float = DEFAULT_L2) -> torch.optim.Adam:
    """Adam whose L2 penalty is added to the gradient before the moment updates."""
    if lr <= 0:
        raise InvalidArgumentError("learning_rate", "learning rate must be positive")
    if l2 < 0:
        raise InvalidArgumentError("l2", "L2 coefficient must be non-negative")
    return torch.optim.Adam(params, lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS, weight_decay=l2)


def _params(optimizer: torch.optim.Optimizer) -> list[Tensor]:
    return [p for group in optimizer.param_groups for p in group["params"]]


def adam_step(optimizer: torch.optim.Optimizer, grads: Sequence[Tensor | np.ndarray] | None = None) -> OptimizerStep:
    """Apply one update from the gradients already on the parameters (or from ``grads``).

    A non-finite gradient rejects the step, clears the gradients and leaves
    the parameters and moments untouched.
    """
    params = _params(optimizer)
    if grads is not None:
        if len(grads) != len(params):
            raise InvalidArgumentError("grad_count", f"expected {len(params)} gradients, got {len(grads)}")
        for param, grad in zip(params, grads, strict=True):
            param.grad = torch.as_tensor(grad, dtype=param.dtype).reshape(param.shape).clone()
    present = [p.grad for p in params if p.grad is not None]
    norm = float(torch.sqrt(sum((g.double() ** 2).sum() for g in present))) if present else 0.0
    if not np.isfinite(norm):
        optimizer.zero_grad(set_to_none=True)
        optimizer_rejected_steps_total.inc()
        logger.warning("Rejected optimizer step: non-finite gradient")
        return OptimizerStep(accepted=False, grad_norm=norm, reason="non_finite_gradient")
    optimizer.step()
    return OptimizerStep(accepted=True, grad_norm=norm)


def fit_regression(
    net: nn.Module,
    inputs: Tensor | np.ndarray,
    targets: Tensor | np.ndarray,
    *,
    epochs: int,
    minibatches: int,
    lr: float,
    rng: np.random.Generator,
    l2: float = DEFAULT_L2,
    optimizer: torch.optim.Optimizer | None = None,
) -> list[float]:
    """Shuffled-minibatch MSE regression; returns the mean loss of every epoch."""
    inputs = torch.as_tensor(inputs, dtype=DTYPE)
    targets = torch.as_tensor(targets, dtype=DTYPE).reshape(-1)
    if inputs.shape[0] == 0:
        raise InvalidArgumentError("empty_dataset", "cannot fit a regression on an empty dataset")
    if inputs.shape[0] != targets.shape[0]:
        raise InvalidArgumentError("dataset_shape", "inputs and targets differ in length")
    if epochs < 0 or minibatches < 1:
        raise InvalidArgumentError("schedule", "epochs must be >= 0 and minibatches >= 1")
    optimizer = optimizer or make_adam(net.parameters(), lr=lr, l2=l2)
    size = inputs.shape[0]
    losses: list[float] = []
    for _ in range(epochs):
        total = 0.0
        for chunk in np.array_split(rng.permutation(size), min(minibatches, size)):
            index = torch.as_tensor(chunk)
            optimizer.zero_grad()
            loss = torch.mean((net(inputs[index]).squeeze(-1) - targets[index]) ** 2)
            loss.backward()
            adam_step(optimizer)
            total += float(loss) * len(chunk)
        losses.append(total / size)
    return losses


def _encode_tensor(tensor: Tensor) -> dict[str, Any]:
    return {"dtype": str(tensor.dtype).removeprefix("torch."), "shape": list(tensor.shape), "data": tensor.flatten().tolist()}


def _decode_tensor(payload: dict[str, Any]) -> Tensor:
    dtype = getattr(torch, payload["dtype"], None)
    if not isinstance(dtype, torch.dtype):
        raise CheckpointError("optimizer_state", f"unknown tensor dtype {payload['dtype']!r}")
    return torch.tensor(payload["data"], dtype=dtype).reshape(payload["shape"])


def optimizer_state(optimizer: torch.optim.Optimizer) -> dict[str, Any]:
    """JSON-safe snapshot of the optimizer moments and hyperparameters."""
    state = optimizer.state_dict()
    return {
        "param_groups": [dict(group) for group in state["param_groups"]],
        "state": {
            str(index): {
                key: _encode_tensor(value) if isinstance(value, Tensor) else value for key, value in entry.items()
            }
            for index, entry in state["state"].items()
        },
    }


def load_optimizer_state(optimizer: torch.optim.Optimizer, payload: dict[str, Any]) -> None:
    try:
        state = {
            int(index): {
                key: _decode_tensor(value) if isinstance(value, dict) else value for key, value in entry.items()
            }
            for index, entry in payload["state"].items()
        }
        groups = [
            {**group, "betas": tuple(group["betas"])} if "betas" in group else group for group in payload["param_groups"]
        ]
        optimizer.load_state_dict({"state": state, "param_groups": groups})
    except (KeyError, TypeError, ValueError, RuntimeError) as exc:
        raise CheckpointError("optimizer_state", f"cannot restore optimizer state: {exc}") from exc
