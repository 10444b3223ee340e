from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

from app.core.errors import CheckpointError, LabError
from app.ml.nets import MlpNet, net_from_architecture
from app.ml.optim import load_optimizer_state, optimizer_state

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "a2d-lab-checkpoint"
CHECKPOINT_VERSION = 1


def _canonical(body: dict[str, Any]) -> str:
    return json.dumps(body, sort_keys=True, separators=(",", ":"))


def _digest(body: dict[str, Any]) -> str:
    return hashlib.sha256(_canonical(body).encode("utf-8")).hexdigest()


@dataclass(frozen=True, eq=False)
class Checkpoint:
    nets: dict[str, dict[str, Any]]
    optimizers: dict[str, dict[str, Any]] = field(default_factory=dict)
    rng_state: dict[str, Any] | None = None
    iteration: int = 0
    config: dict[str, Any] = field(default_factory=dict)
    extra: dict[str, Any] = field(default_factory=dict)

    def params(self, name: str) -> np.ndarray:
        return np.array(self._entry(name)["params"], dtype=float)

    def build_net(self, name: str) -> MlpNet:
        entry = self._entry(name)
        try:
            net = net_from_architecture(entry["architecture"])
            net.set_flat(np.array(entry["params"], dtype=float))
        except (KeyError, TypeError, LabError) as exc:
            raise CheckpointError("corrupt_checkpoint", f"network {name!r} cannot be rebuilt: {exc}") from exc
        return net

    def restore_optimizer(self, name: str, optimizer: torch.optim.Optimizer) -> None:
        if name not in self.optimizers:
            raise CheckpointError("missing_optimizer", f"checkpoint has no optimizer {name!r}")
        load_optimizer_state(optimizer, self.optimizers[name])

    def generator(self) -> np.random.Generator:
        if self.rng_state is None:
            raise CheckpointError("missing_rng", "checkpoint carries no generator state")
        try:
            bit_generator = getattr(np.random, self.rng_state["bit_generator"])()
            bit_generator.state = self.rng_state
        except (AttributeError, KeyError, TypeError, ValueError) as exc:
            raise CheckpointError("corrupt_checkpoint", f"generator state cannot be restored: {exc}") from exc
        return np.random.Generator(bit_generator)

    def _entry(self, name: str) -> dict[str, Any]:
        if name not in self.nets:
            raise CheckpointError("missing_net", f"checkpoint has no network {name!r}")
        return self.nets[name]


def save_checkpoint(
    path: str | Path,
    *,
    nets: dict[str, MlpNet],
    optimizers: dict[str, torch.optim.Optimizer] | None = None,
    rng: np.random.Generator | None = None,
    iteration: int = 0,
    config: dict[str, Any] | None = None,
    extra: dict[str, Any] | None = None,
) -> Path:
    """Write a versioned JSON checkpoint atomically (temp file, then rename)."""
    body = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "nets": {name: {"architecture": net.architecture(), "params": net.get_flat().tolist()} for name, net in nets.items()},
        "optimizers": {name: optimizer_state(opt) for name, opt in (optimizers or {}).items()},
        "rng_state": rng.bit_generator.state if rng is not None else None,
        "iteration": iteration,
        "config": config or {},
        "extra": extra or {},
    }
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = target.with_name(target.name + ".tmp")
    tmp.write_text(json.dumps({**body, "sha256": _digest(body)}), encoding="utf-8")
    os.replace(tmp, target)
    logger.debug("Checkpoint written to %s (iteration %s)", target, iteration)
    return target


def load_checkpoint(path: str | Path) -> Checkpoint:
    source = Path(path)
    try:
        payload = json.loads(source.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise CheckpointError("missing_checkpoint", f"no checkpoint at {source}") from exc
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError("corrupt_checkpoint", f"{source} is not a readable checkpoint") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError("corrupt_checkpoint", f"{source} is not an a2d-lab checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            "checkpoint_version", f"checkpoint version {payload.get('version')!r}, expected {CHECKPOINT_VERSION}"
        )
    digest = payload.pop("sha256", None)
    if digest != _digest(payload):
        raise CheckpointError("corrupt_checkpoint", f"{source} failed its integrity check")
    try:
        return Checkpoint(
            nets=dict(payload["nets"]),
            optimizers=dict(payload["optimizers"]),
            rng_state=payload["rng_state"],
            iteration=int(payload["iteration"]),
            config=dict(payload["config"]),
            extra=dict(payload["extra"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError("corrupt_checkpoint", f"{source} is missing checkpoint fields") from exc
