from __future__ import annotations

import json

import pytest

from app.cli import build_parser, main


def test_eval_without_inputs_is_a_usage_error(capsys) -> None:
    assert main(["eval"]) == 2
    assert "--checkpoint" in capsys.readouterr().err


def test_oracle_prints_the_report(capsys) -> None:
    assert main(["oracle", "--env", "tiger_door_1"]) == 0
    report = json.loads(capsys.readouterr().out)

    assert report["mdp_opt"] == pytest.approx(18.0)
    assert report["pomdp_opt"] == pytest.approx(16.0)
    assert report["implicit_of_greedy_return"] == pytest.approx(-42.0)


def test_lab_errors_exit_with_status_two(tmp_path, capsys) -> None:
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == 2
    error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])

    assert error["kind"] == "config"
    assert error["code"] == "missing_config"


def test_invalid_metrics_exit_with_status_one(tmp_path, capsys) -> None:
    path = tmp_path / "metrics.jsonl"
    path.write_text(json.dumps({"method": "a2d"}) + "\n")

    assert main(["eval", "--metrics", str(path)]) == 1
    assert "line 1:" in capsys.readouterr().err


def test_env_dump(capsys) -> None:
    assert main(["env", "dump", "--env", "tiger_door_1"]) == 0
    out = capsys.readouterr().out

    assert "S" in out
    assert '"num_states": 5' in out
    assert '"label": "terminal"' in out


def test_run_with_overrides(tmp_path, capsys) -> None:
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"method": "oracle", "env": "frozen_lake"}))
    out_dir = tmp_path / "oracle"

    code = main(["run", "--config", str(config), "--set", "env=tiger_door_1", "--set", f"output_dir={out_dir}"])

    assert code == 0
    assert json.loads(capsys.readouterr().out)["env"] == "tiger_door_1"
    assert (out_dir / "oracle.json").exists()


def test_unknown_layouts_are_rejected_by_the_parser() -> None:
    with pytest.raises(SystemExit):
        build_parser().parse_args(["oracle", "--env", "mars"])
