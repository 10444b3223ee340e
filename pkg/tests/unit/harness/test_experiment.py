from __future__ import annotations

import json
from pathlib import Path

import pytest

from app.core.errors import ConfigurationError
from app.domains.training.schemas import RunConfig
from app.services.checkpoints import load_checkpoint
from app.services.experiment import (
    SweepRow,
    apply_overrides,
    evaluate_checkpoint,
    format_sweep_table,
    load_expert,
    load_run_config,
    run,
    sweep_lambda,
)
from app.services.metrics_log import read_metrics, validate_metrics_file
from tests.factories import tiny_config


def _write_config(tmp_path: Path, payload: dict) -> Path:
    path = tmp_path / "config.json"
    path.write_text(json.dumps(payload))
    return path


def test_overrides_parse_json_and_reach_nested_sections() -> None:
    merged = apply_overrides(
        {"method": "a2d", "trust_region": {"max_kl": 0.01}},
        ["trust_region.max_kl=0.02", "iterations=5", "env=tiger_door_1", "hidden=[16, 16]"],
    )

    assert merged == {
        "method": "a2d",
        "trust_region": {"max_kl": 0.02},
        "iterations": 5,
        "env": "tiger_door_1",
        "hidden": [16, 16],
    }
    with pytest.raises(ConfigurationError):
        apply_overrides({}, ["iterations"])
    with pytest.raises(ConfigurationError):
        apply_overrides({"seed": 1}, ["seed.x=2"])


def test_flags_win_over_the_file(tmp_path) -> None:
    path = _write_config(tmp_path, {"method": "a2d", "env": "frozen_lake", "seed": 3})
    cfg = load_run_config(path, ["seed=4", "lambda=0.5"])

    assert cfg.seed == 4
    assert cfg.lam == 0.5
    assert cfg.env == "frozen_lake"


def test_config_errors_are_structured(tmp_path) -> None:
    with pytest.raises(ConfigurationError) as missing:
        load_run_config(tmp_path / "absent.json")
    assert missing.value.code == "missing_config"

    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    with pytest.raises(ConfigurationError) as invalid_json:
        load_run_config(broken)
    assert invalid_json.value.code == "invalid_config"

    with pytest.raises(ConfigurationError) as unknown:
        load_run_config(_write_config(tmp_path, {"method": "a2d", "env": "nowhere", "bogus": 1}))
    fields = unknown.value.context["fields"]
    assert any(field.startswith("env:") for field in fields)
    assert any(field.startswith("bogus:") for field in fields)
    assert unknown.value.to_dict()["kind"] == "config"


def test_imitation_needs_an_expert(tmp_path) -> None:
    with pytest.raises(ConfigurationError, match="expert_checkpoint"):
        load_run_config(_write_config(tmp_path, {"method": "ail", "env": "tiger_door_1"}))

    cfg = load_run_config(None, ["method=ail", "env=tiger_door_1", "use_oracle_expert=true"])
    assert cfg.use_oracle_expert


def test_method_defaults(output_root) -> None:
    a2d_lake = RunConfig(method="a2d", env="frozen_lake").resolved()
    assert a2d_lake.lam == 0.9
    assert a2d_lake.entropy_coef == 10.0
    assert a2d_lake.beta_schedule == "multiplicative"
    assert Path(a2d_lake.output_dir) == output_root / "a2d-frozen_lake-seed0"

    assert a2d_lake.entropy_mode == "advantage"
    assert a2d_lake.trust_region.max_kl == 0.01

    door = RunConfig(method="a2d", env="tiger_door_2").resolved()
    assert door.lam == 0.5
    assert door.entropy_coef == 0.02
    assert door.entropy_mode == "surrogate"
    assert door.trust_region.max_kl == pytest.approx(1e-3)
    widened = RunConfig(method="a2d_q", env="tiger_door_1", trust_region={"max_kl": 0.01}).resolved()
    assert widened.trust_region.max_kl == 0.01
    assert RunConfig(method="a2d", env="tiger_door_0").resolved().lam == 0.95
    assert RunConfig(method="rl_pomdp", env="frozen_lake").resolved().entropy_coef == 1.0
    ail = RunConfig(method="ail", env="tiger_door_1", use_oracle_expert=True).resolved()
    assert ail.beta_schedule == "immediate_zero"
    assert ail.entropy_coef == 0.0


def test_oracle_run_writes_its_report(output_root) -> None:
    outcome = run(RunConfig(method="oracle", env="tiger_door_0"))
    report = json.loads((outcome.output_dir / "oracle.json").read_text())

    assert outcome.output_dir == output_root / "oracle-tiger_door_0-seed0"
    assert report["mdp_opt"] == pytest.approx(6.0)
    assert report["pomdp_opt"] == pytest.approx(2.0)
    assert report["identifiable"] is False
    assert json.loads((outcome.output_dir / "config.resolved.json").read_text())["method"] == "oracle"


def test_a2d_run_leaves_valid_artifacts(output_root) -> None:
    outcome = run(tiny_config())
    out = outcome.output_dir

    rows = read_metrics(out / "metrics.jsonl")
    assert [row["iteration"] for row in rows] == [0, 1]
    assert validate_metrics_file(out / "metrics.jsonl") == []
    assert load_checkpoint(out / "last.json").iteration == 2
    assert set(load_checkpoint(out / "best.json").nets) == {"expert", "trainee", "expert_value", "trainee_value"}
    summary = json.loads((out / "summary.json").read_text())
    assert summary["evaluations"] == 2
    assert summary["env_steps_total"] == 128
    assert summary["final"]["iteration"] == 1


def test_a2d_run_resumes_from_its_last_checkpoint(output_root) -> None:
    first = run(tiny_config())
    resumed = run(tiny_config(iterations=3), resume_from=first.output_dir / "last.json")

    assert [r.iteration for r in resumed.records] == [2]
    assert [row["iteration"] for row in read_metrics(resumed.output_dir / "metrics.jsonl")] == [0, 1, 2]
    assert resumed.summary["env_steps_total"] == 192


def test_imitation_and_rl_runs(output_root) -> None:
    ail = run(tiny_config(method="ail", use_oracle_expert=True))
    assert set(load_checkpoint(ail.output_dir / "best.json").nets) == {"trainee"}
    assert set(load_checkpoint(ail.output_dir / "last.json").nets) == {"trainee"}
    assert validate_metrics_file(ail.output_dir / "metrics.jsonl") == []

    rl = run(tiny_config(method="rl_asym"))
    assert set(load_checkpoint(rl.output_dir / "best.json").nets) == {"policy", "value"}
    assert rl.summary["env_steps_total"] == 128


def test_saved_experts_must_read_states(output_root, tiger_door_1) -> None:
    a2d = run(tiny_config())
    expert = load_expert(tiny_config(method="ail", expert_checkpoint=str(a2d.output_dir / "best.json")), tiger_door_1)
    assert expert.input_domain == "state"

    pomdp = run(tiny_config(method="rl_pomdp"))
    with pytest.raises(ConfigurationError):
        load_expert(tiny_config(method="ail", expert_checkpoint=str(pomdp.output_dir / "best.json")), tiger_door_1)


def test_checkpoint_evaluation(output_root) -> None:
    outcome = run(tiny_config())
    report = evaluate_checkpoint(outcome.output_dir / "best.json", n_interactions=20, seed=1)

    assert report["network"] == "trainee"
    assert report["env"] == "tiger_door_1"
    assert report["interactions"] >= 20
    assert report["deterministic_return"] is not None


def test_sweep_table_format() -> None:
    rows = [
        SweepRow(lam=0.0, seeds=(0, 1), deterministic_returns=(2.0, 4.0), buffer_kls=(0.5, 0.25)),
        SweepRow(lam=1.0, seeds=(0,), deterministic_returns=(None,), buffer_kls=(None,)),
    ]

    assert format_sweep_table(rows).splitlines() == [
        "  lambda   median return   median buffer KL",
        "    0.00          3.0000             0.3750",
        "    1.00               -                  -",
    ]
    assert rows[0].to_dict()["median_deterministic_return"] == 3.0


def test_lambda_sweep(output_root) -> None:
    with pytest.raises(ConfigurationError):
        sweep_lambda(tiny_config(method="a2d_q"))

    rows = sweep_lambda(tiny_config(iterations=1), values=(0.0, 1.0), seeds=(0,))

    assert [row.lam for row in rows] == [0.0, 1.0]
    assert all(row.median_return is not None for row in rows)
    assert (output_root / "sweep-tiger_door_1" / "sweep.json").exists()
    assert (output_root / "sweep-tiger_door_1" / "sweep.txt").read_text().startswith("  lambda")


@pytest.mark.parametrize("path", sorted((Path(__file__).resolve().parents[3] / "configs").glob("*.json")), ids=lambda p: p.stem)
def test_shipped_configs_are_valid(path: Path) -> None:
    cfg = load_run_config(path)

    assert cfg.resolved().lam is not None
