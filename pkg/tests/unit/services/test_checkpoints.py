from __future__ import annotations

import json

import numpy as np
import pytest

from app.core.errors import CheckpointError
from app.ml.nets import CategoricalPolicyNet, ValueNet
from app.ml.optim import adam_step, make_adam
from app.services.checkpoints import CHECKPOINT_FORMAT, load_checkpoint, save_checkpoint


def _saved(tmp_path, rng):
    policy = CategoricalPolicyNet(3, 4, input_domain="belief", hidden=(5,), seed=1)
    value = ValueNet(6, hidden=(4,), seed=2)
    optimizer = make_adam(value.parameters(), lr=1e-3)
    adam_step(optimizer, [np.full(p.numel(), 0.1).reshape(tuple(p.shape)) for p in value.parameters()])
    path = save_checkpoint(
        tmp_path / "ckpt" / "last.json",
        nets={"trainee": policy, "value": value},
        optimizers={"value": optimizer},
        rng=rng,
        iteration=7,
        config={"method": "a2d"},
        extra={"env_steps": 140},
    )
    return path, policy, value, optimizer


def test_round_trip_restores_everything(tmp_path, rng) -> None:
    path, policy, value, optimizer = _saved(tmp_path, rng)
    checkpoint = load_checkpoint(path)

    rebuilt = checkpoint.build_net("trainee")
    assert isinstance(rebuilt, CategoricalPolicyNet)
    assert rebuilt.input_domain == "belief"
    assert np.array_equal(rebuilt.get_flat(), policy.get_flat())
    assert np.array_equal(checkpoint.params("value"), value.get_flat())
    assert checkpoint.iteration == 7
    assert checkpoint.config == {"method": "a2d"}
    assert checkpoint.extra == {"env_steps": 140}
    assert np.array_equal(checkpoint.generator().random(5), rng.random(5))

    twin = ValueNet(6, hidden=(4,), seed=2)
    twin.set_flat(value.get_flat())
    twin_optimizer = make_adam(twin.parameters(), lr=1e-3)
    checkpoint.restore_optimizer("value", twin_optimizer)
    grads = [np.full(p.numel(), -0.3).reshape(tuple(p.shape)) for p in value.parameters()]
    adam_step(optimizer, grads)
    adam_step(twin_optimizer, grads)
    assert np.array_equal(twin.get_flat(), value.get_flat())


def test_writes_are_atomic(tmp_path, rng) -> None:
    path, *_ = _saved(tmp_path, rng)

    assert path.exists()
    assert not path.with_name(path.name + ".tmp").exists()
    assert json.loads(path.read_text())["format"] == CHECKPOINT_FORMAT


def test_missing_checkpoint(tmp_path) -> None:
    with pytest.raises(CheckpointError) as exc:
        load_checkpoint(tmp_path / "nope.json")
    assert exc.value.code == "missing_checkpoint"


def test_truncated_checkpoint(tmp_path, rng) -> None:
    path, *_ = _saved(tmp_path, rng)
    text = path.read_text()
    path.write_text(text[: len(text) // 2])

    with pytest.raises(CheckpointError) as exc:
        load_checkpoint(path)
    assert exc.value.code == "corrupt_checkpoint"


def test_tampered_parameters_fail_the_integrity_check(tmp_path, rng) -> None:
    path, *_ = _saved(tmp_path, rng)
    payload = json.loads(path.read_text())
    payload["nets"]["value"]["params"][0] += 1.0
    path.write_text(json.dumps(payload))

    with pytest.raises(CheckpointError) as exc:
        load_checkpoint(path)
    assert exc.value.code == "corrupt_checkpoint"


def test_version_mismatch(tmp_path, rng) -> None:
    path, *_ = _saved(tmp_path, rng)
    payload = json.loads(path.read_text())
    payload["version"] = 99
    path.write_text(json.dumps(payload))

    with pytest.raises(CheckpointError) as exc:
        load_checkpoint(path)
    assert exc.value.code == "checkpoint_version"


def test_foreign_json_is_rejected(tmp_path) -> None:
    path = tmp_path / "other.json"
    path.write_text(json.dumps({"format": "something-else"}))

    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_unknown_names_are_reported(tmp_path, rng) -> None:
    checkpoint = load_checkpoint(_saved(tmp_path, rng)[0])

    with pytest.raises(CheckpointError) as exc:
        checkpoint.build_net("expert")
    assert exc.value.code == "missing_net"
    with pytest.raises(CheckpointError):
        checkpoint.restore_optimizer("trainee", make_adam(ValueNet(6, hidden=(4,)).parameters(), lr=1e-3))
