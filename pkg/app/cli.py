from __future__ import annotations

import argparse
import json
import logging
import sys
from collections.abc import Sequence

from app.core.config import settings
from app.core.errors import LabError
from app.domains.envpair.layouts import describe_states, make_named_pair, render_ascii
from app.domains.envpair.models import LAYOUTS
from app.domains.oracle.analysis import oracle_report
from app.domains.training.schemas import LAMBDA_SWEEP
from app.services.experiment import evaluate_checkpoint, format_sweep_table, load_run_config, run, sweep_lambda
from app.services.metrics_log import validate_metrics_file

logger = logging.getLogger(__name__)


def _emit(payload: object) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def _cmd_run(args: argparse.Namespace) -> int:
    outcome = run(load_run_config(args.config, args.overrides), resume_from=args.resume)
    _emit(outcome.summary)
    return 0


def _cmd_oracle(args: argparse.Namespace) -> int:
    _emit(oracle_report(make_named_pair(args.env), window=args.window))
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    base = load_run_config(args.config, args.overrides)
    rows = sweep_lambda(base, args.values or LAMBDA_SWEEP, seeds=args.seeds)
    print(format_sweep_table(rows))
    return 0


def _cmd_env_dump(args: argparse.Namespace) -> int:
    pair = make_named_pair(args.env)
    print(render_ascii(pair))
    _emit(
        {
            "env": pair.name,
            "num_states": pair.num_states,
            "num_actions": pair.num_actions,
            "state_dim": pair.state_dim,
            "obs_dim": pair.obs_dim,
            "states": describe_states(pair),
        }
    )
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    if args.metrics:
        errors = validate_metrics_file(args.metrics)
        for line in errors:
            print(f" - {line}", file=sys.stderr)
        if errors:
            return 1
    if args.checkpoint:
        _emit(evaluate_checkpoint(args.checkpoint, n_interactions=args.interactions, seed=args.seed, env=args.env))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="a2d-lab", description="A2D and baselines on MDP/POMDP gridworld pairs.")
    commands = parser.add_subparsers(dest="command", required=True)

    run_cmd = commands.add_parser("run", help="run one experiment from a JSON config")
    run_cmd.add_argument("--config", required=True)
    run_cmd.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    run_cmd.add_argument("--resume", default=None, help="A2D checkpoint to continue from")
    run_cmd.set_defaults(handler=_cmd_run)

    oracle_cmd = commands.add_parser("oracle", help="print the exact oracle report for a layout")
    oracle_cmd.add_argument("--env", required=True, choices=LAYOUTS)
    oracle_cmd.add_argument("--window", type=int, default=1)
    oracle_cmd.set_defaults(handler=_cmd_oracle)

    sweep_cmd = commands.add_parser("sweep-lambda", help="run the GAE-lambda sweep")
    sweep_cmd.add_argument("--config", required=True)
    sweep_cmd.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    sweep_cmd.add_argument("--values", type=float, nargs="+", default=None)
    sweep_cmd.add_argument("--seeds", type=int, nargs="+", default=None)
    sweep_cmd.set_defaults(handler=_cmd_sweep)

    env_cmd = commands.add_parser("env", help="inspect a layout")
    env_commands = env_cmd.add_subparsers(dest="env_command", required=True)
    dump_cmd = env_commands.add_parser("dump", help="print the enumerated states and an ASCII render")
    dump_cmd.add_argument("--env", required=True, choices=LAYOUTS)
    dump_cmd.set_defaults(handler=_cmd_env_dump)

    eval_cmd = commands.add_parser("eval", help="evaluate a checkpoint and/or validate a metrics file")
    eval_cmd.add_argument("--checkpoint", default=None)
    eval_cmd.add_argument("--env", default=None, choices=LAYOUTS)
    eval_cmd.add_argument("--interactions", type=int, default=2000)
    eval_cmd.add_argument("--seed", type=int, default=0)
    eval_cmd.add_argument("--metrics", default=None, help="metrics.jsonl to validate against the schema")
    eval_cmd.set_defaults(handler=_cmd_eval)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=settings.log_level_value, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if args.command == "eval" and not (args.checkpoint or args.metrics):
        print("eval needs --checkpoint and/or --metrics", file=sys.stderr)
        return 2
    try:
        return args.handler(args)
    except LabError as exc:
        print(json.dumps(exc.to_dict(), sort_keys=True), file=sys.stderr)
        return 2
    except Exception:
        logger.exception("Unhandled error in %s", args.command)
        return 1


if __name__ == "__main__":
    sys.exit(main())
