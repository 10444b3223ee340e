from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Literal

import numpy as np
import torch
from torch import Tensor, nn
from torch.nn.utils import parameters_to_vector, vector_to_parameters

from app.core.errors import DimensionError, InvalidArgumentError, NonFiniteError
from app.core.numerics import LOG_PROB_FLOOR

DTYPE = torch.float64
DEFAULT_HIDDEN = (64, 64)
POLICY_OUTPUT_SCALE = 0.01

InputDomain = Literal["state", "belief"]
Activation = Literal["tanh", "relu"]

_ACTIVATIONS: dict[str, type[nn.Module]] = {"tanh": nn.Tanh, "relu": nn.ReLU}


def seed_from(rng: np.random.Generator) -> int:
    return int(rng.integers(2**31 - 1))


def build_mlp(
    in_dim: int,
    out_dim: int,
    hidden: tuple[int, ...],
    activation: str,
    *,
    output_scale: float,
    seed: int,
) -> nn.Sequential:
    """Orthogonally initialized MLP with zero biases; the output layer is scaled by ``output_scale``."""
    if activation not in _ACTIVATIONS:
        raise InvalidArgumentError("activation", f"unknown activation {activation!r}")
    if in_dim < 1 or out_dim < 1 or any(size < 1 for size in hidden):
        raise DimensionError("layer_sizes", "layer sizes must be positive")
    layers: list[nn.Module] = []
    width = in_dim
    for size in hidden:
        layers += [nn.Linear(width, size, dtype=DTYPE), _ACTIVATIONS[activation]()]
        width = size
    layers.append(nn.Linear(width, out_dim, dtype=DTYPE))
    linears = [layer for layer in layers if isinstance(layer, nn.Linear)]
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        for index, layer in enumerate(linears):
            last = index == len(linears) - 1
            nn.init.orthogonal_(layer.weight, gain=output_scale if last else nn.init.calculate_gain(activation))
            nn.init.zeros_(layer.bias)
    return nn.Sequential(*layers)


def flatten_grads(grads: tuple[Tensor | None, ...], params: list[nn.Parameter]) -> Tensor:
    return torch.cat(
        [
            (grad if grad is not None else torch.zeros_like(param)).reshape(-1)
            for grad, param in zip(grads, params, strict=True)
        ]
    )


class MlpNet(nn.Module):
    """Fixed-architecture MLP over state or belief vectors, float64 on CPU."""

    kind = "mlp"

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        *,
        input_domain: InputDomain = "state",
        hidden: tuple[int, ...] = DEFAULT_HIDDEN,
        activation: Activation = "tanh",
        output_scale: float = 1.0,
        seed: int = 0,
    ) -> None:
        super().__init__()
        if input_domain not in ("state", "belief"):
            raise InvalidArgumentError("input_domain", f"unknown input domain {input_domain!r}")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.input_domain: InputDomain = input_domain
        self.hidden = tuple(hidden)
        self.activation: Activation = activation
        self.body = build_mlp(in_dim, out_dim, self.hidden, activation, output_scale=output_scale, seed=seed)

    def forward(self, x: Tensor) -> Tensor:
        return self.body(x)

    @property
    def feature_dim(self) -> int:
        return self.in_dim

    @property
    def num_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def as_tensor(self, x: np.ndarray | Tensor, dim: int | None = None) -> Tensor:
        dim = self.feature_dim if dim is None else dim
        if not isinstance(x, Tensor):
            x = np.asarray(x, dtype=float)
        tensor = torch.as_tensor(x, dtype=DTYPE)
        if tensor.ndim == 1:
            tensor = tensor[None, :]
        if tensor.ndim != 2 or tensor.shape[1] != dim:
            raise DimensionError("input_dim", f"expected inputs of width {dim}, got shape {tuple(tensor.shape)}")
        if not torch.isfinite(tensor).all():
            raise NonFiniteError("non_finite_input", "network input contains non-finite entries")
        return tensor

    def select_inputs(self, state_vecs: np.ndarray, belief_vecs: np.ndarray) -> np.ndarray:
        return state_vecs if self.input_domain == "state" else belief_vecs

    def get_flat(self) -> np.ndarray:
        return parameters_to_vector(self.parameters()).detach().numpy().copy()

    def set_flat(self, flat: np.ndarray) -> None:
        vector = torch.as_tensor(np.asarray(flat, dtype=float), dtype=DTYPE)
        if vector.shape != (self.num_params,):
            raise DimensionError("param_count", f"expected {self.num_params} parameters, got {tuple(vector.shape)}")
        with torch.no_grad():
            vector_to_parameters(vector.clone(), self.parameters())

    def architecture(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "in_dim": self.in_dim,
            "out_dim": self.out_dim,
            "input_domain": self.input_domain,
            "hidden": list(self.hidden),
            "activation": self.activation,
        }


@dataclass(frozen=True)
class PolicyOutput:
    probs: np.ndarray
    log_probs: np.ndarray


class CategoricalPolicyNet(MlpNet):
    kind = "policy"

    def __init__(
        self,
        in_dim: int,
        num_actions: int,
        *,
        input_domain: InputDomain = "state",
        hidden: tuple[int, ...] = DEFAULT_HIDDEN,
        activation: Activation = "tanh",
        seed: int = 0,
    ) -> None:
        super().__init__(
            in_dim,
            num_actions,
            input_domain=input_domain,
            hidden=hidden,
            activation=activation,
            output_scale=POLICY_OUTPUT_SCALE,
            seed=seed,
        )

    @property
    def num_actions(self) -> int:
        return self.out_dim

    def log_probs(self, x: Tensor) -> Tensor:
        return torch.log_softmax(self(x), dim=-1)

    def distribution(self, x: np.ndarray) -> PolicyOutput:
        with torch.no_grad():
            log_probs = self.log_probs(self.as_tensor(x))
        return PolicyOutput(
            probs=torch.exp(log_probs).numpy(),
            log_probs=torch.clamp(log_probs, min=LOG_PROB_FLOOR).numpy(),
        )

    def action_probs(self, state_ids: np.ndarray, state_vecs: np.ndarray, belief_vecs: np.ndarray) -> np.ndarray:
        return self.distribution(self.select_inputs(state_vecs, belief_vecs)).probs

    def grad_log_prob(self, x: np.ndarray, action: int) -> np.ndarray:
        """Flat gradient of log pi(action | x) for a single input row."""
        if not 0 <= int(action) < self.num_actions:
            raise InvalidArgumentError("action", f"action {action} outside [0, {self.num_actions})")
        params = list(self.parameters())
        log_prob = self.log_probs(self.as_tensor(x))[0, int(action)]
        return flatten_grads(torch.autograd.grad(log_prob, params), params).numpy()

    def entropy_tensor(self, x: Tensor) -> Tensor:
        log_probs = self.log_probs(x)
        return -(torch.exp(log_probs) * log_probs).sum(dim=-1)

    def entropy(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        """Mean entropy over the rows of ``x`` and its flat parameter gradient."""
        params = list(self.parameters())
        value = self.entropy_tensor(self.as_tensor(x)).mean()
        grad = flatten_grads(torch.autograd.grad(value, params), params)
        return float(value), grad.numpy()

    def sample(self, x: np.ndarray, rng: np.random.Generator) -> tuple[int, float]:
        output = self.distribution(x)
        action = int(rng.choice(self.num_actions, p=output.probs[0]))
        return action, float(output.log_probs[0, action])


class ValueNet(MlpNet):
    kind = "value"

    def __init__(
        self,
        in_dim: int,
        *,
        input_domain: InputDomain = "state",
        hidden: tuple[int, ...] = DEFAULT_HIDDEN,
        activation: Activation = "tanh",
        seed: int = 0,
    ) -> None:
        super().__init__(in_dim, 1, input_domain=input_domain, hidden=hidden, activation=activation, seed=seed)

    def values(self, x: Tensor) -> Tensor:
        return self(x).squeeze(-1)

    def predict(self, x: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            return self.values(self.as_tensor(x)).numpy()


class QNet(MlpNet):
    """Q(x, a) with the action appended to the input as a one-hot block."""

    kind = "q"

    def __init__(
        self,
        in_dim: int,
        num_actions: int,
        *,
        input_domain: InputDomain = "belief",
        hidden: tuple[int, ...] = DEFAULT_HIDDEN,
        activation: Activation = "tanh",
        seed: int = 0,
    ) -> None:
        super().__init__(
            in_dim + num_actions, 1, input_domain=input_domain, hidden=hidden, activation=activation, seed=seed
        )
        self.base_dim = in_dim
        self.num_actions = num_actions

    def features(self, x: np.ndarray, actions: np.ndarray) -> Tensor:
        inputs = self.as_tensor(x, self.base_dim)
        actions = torch.as_tensor(np.asarray(actions, dtype=int).reshape(-1))
        if actions.shape[0] != inputs.shape[0]:
            raise DimensionError("action_count", "one action per input row is required")
        if actions.numel() and (actions.min() < 0 or actions.max() >= self.num_actions):
            raise InvalidArgumentError("action", "actions outside the action range")
        one_hot = nn.functional.one_hot(actions, self.num_actions).to(DTYPE)
        return torch.cat([inputs, one_hot], dim=1)

    def predict(self, x: np.ndarray, actions: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            return self(self.features(x, actions)).squeeze(-1).numpy()

    def predict_all(self, x: np.ndarray) -> np.ndarray:
        inputs = np.atleast_2d(np.asarray(x, dtype=float))
        rows = inputs.shape[0]
        repeated = np.repeat(inputs, self.num_actions, axis=0)
        actions = np.tile(np.arange(self.num_actions), rows)
        return self.predict(repeated, actions).reshape(rows, self.num_actions)

    def architecture(self) -> dict[str, Any]:
        return {**super().architecture(), "in_dim": self.base_dim, "num_actions": self.num_actions}


def net_from_architecture(spec: dict[str, Any]) -> MlpNet:
    kind = spec.get("kind")
    common = {
        "input_domain": spec["input_domain"],
        "hidden": tuple(spec["hidden"]),
        "activation": spec["activation"],
    }
    if kind == "policy":
        return CategoricalPolicyNet(spec["in_dim"], spec["out_dim"], **common)
    if kind == "value":
        return ValueNet(spec["in_dim"], **common)
    if kind == "q":
        return QNet(spec["in_dim"], spec["num_actions"], **common)
    raise InvalidArgumentError("net_kind", f"unknown network kind {kind!r}")
