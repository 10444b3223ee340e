from __future__ import annotations

import json
import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from statistics import median
from typing import Any

import numpy as np
from pydantic import ValidationError

from app.core.config import settings
from app.core.errors import ConfigurationError
from app.domains.envpair.layouts import make_named_pair
from app.domains.envpair.models import ProcessPair
from app.domains.envpair.sampling import ActionSource
from app.domains.oracle.analysis import oracle_report
from app.domains.oracle.solvers import optimal_mdp_policy
from app.domains.training.schemas import A2D_METHODS, LAMBDA_SWEEP, RL_METHODS, MetricsRecord, RunConfig
from app.observability.metrics import dump_textfile
from app.observability.tracing import flush_tracing, setup_tracing, span
from app.services.a2d import a2d_train, restore_a2d_state, save_a2d_state
from app.services.checkpoints import load_checkpoint, save_checkpoint
from app.services.evaluation import evaluate
from app.services.imitation import ail_train
from app.services.metrics_log import MetricsWriter
from app.services.rl import rl_train

logger = logging.getLogger(__name__)


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(payload: dict[str, Any], overrides: Sequence[str]) -> dict[str, Any]:
    """Apply ``key=value`` flags; dotted keys reach nested models and values parse as JSON when they can."""
    merged = json.loads(json.dumps(payload))
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key.strip():
            raise ConfigurationError("invalid_override", f"override {item!r} must look like key=value")
        *parents, leaf = key.strip().split(".")
        target = merged
        for part in parents:
            child = target.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigurationError("invalid_override", f"{part!r} in {key!r} is not a nested section")
            target = child
        target[leaf] = _parse_value(raw)
    return merged


def load_run_config(path: str | Path | None, overrides: Sequence[str] = ()) -> RunConfig:
    payload: dict[str, Any] = {}
    if path is not None:
        source = Path(path)
        try:
            payload = json.loads(source.read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigurationError("missing_config", f"config file {source} does not exist") from exc
        except json.JSONDecodeError as exc:
            raise ConfigurationError("invalid_config", f"{source} is not valid JSON: {exc.msg}") from exc
        if not isinstance(payload, dict):
            raise ConfigurationError("invalid_config", f"{source} must hold a JSON object")
    payload = apply_overrides(payload, overrides)
    try:
        return RunConfig.model_validate(payload)
    except ValidationError as exc:
        fields = [f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}" for err in exc.errors()]
        raise ConfigurationError("invalid_config", "; ".join(fields), fields=fields) from exc


def load_expert(cfg: RunConfig, pair: ProcessPair) -> ActionSource:
    """Fixed expert for the AIL baseline: the oracle MDP policy or a saved state-input policy."""
    if cfg.use_oracle_expert:
        expert, value = optimal_mdp_policy(pair)
        logger.info("Using the oracle MDP policy as expert (return %.4f)", value)
        return expert
    checkpoint = load_checkpoint(cfg.expert_checkpoint)
    name = "expert" if "expert" in checkpoint.nets else "policy"
    net = checkpoint.build_net(name)
    if net.input_domain != "state" or net.in_dim != pair.state_dim:
        raise ConfigurationError("expert_checkpoint", f"{cfg.expert_checkpoint} does not hold a state-input policy")
    return net


@dataclass
class RunOutcome:
    config: RunConfig
    output_dir: Path
    records: list[MetricsRecord] = field(default_factory=list)
    summary: dict[str, Any] = field(default_factory=dict)


def _write_json(path: Path, payload: Any) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def run(cfg: RunConfig, *, resume_from: str | Path | None = None) -> RunOutcome:
    """Dispatch one experiment and leave config, metrics, checkpoints and a summary in its output directory."""
    cfg = cfg.resolved()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.resolved.json", cfg.model_dump(mode="json", by_alias=True))
    setup_tracing(service_name=f"a2d-lab-{cfg.method}")
    pair = make_named_pair(cfg.env)
    rng = np.random.default_rng(cfg.seed)
    config_dump = cfg.model_dump(mode="json", by_alias=True)
    outcome = RunOutcome(config=cfg, output_dir=out)
    logger.info("Run %s on %s (seed %s) writing to %s", cfg.method, cfg.env, cfg.seed, out)

    if cfg.method == "oracle":
        with span("oracle.report", env=cfg.env):
            report = oracle_report(pair, window=cfg.window)
        _write_json(out / "oracle.json", report)
        outcome.summary = report
        logger.info("Oracle on %s: mdp_opt=%.4f pomdp_opt=%.4f", cfg.env, report["mdp_opt"], report["pomdp_opt"])
        return _finish(outcome)

    metrics_path = out / "metrics.jsonl"
    if metrics_path.exists() and resume_from is None:
        metrics_path.unlink()
    writer = MetricsWriter(metrics_path)

    def record(row: MetricsRecord) -> None:
        writer(row)
        outcome.records.append(row)

    if cfg.method in RL_METHODS:
        result = rl_train(pair, cfg, rng, callback=record)
        save_checkpoint(out / "best.json", nets={"policy": result.policy, "value": result.value}, config=config_dump)
        best, steps = result.best_deterministic_return, result.env_steps
    elif cfg.method == "ail":
        result = ail_train(pair, load_expert(cfg, pair), cfg, rng, callback=record)
        best_trainee = result.best_trainee if result.best_trainee is not None else result.trainee
        save_checkpoint(out / "best.json", nets={"trainee": best_trainee}, config=config_dump)
        save_checkpoint(out / "last.json", nets={"trainee": result.trainee}, config=config_dump)
        best = result.best_deterministic_return
        steps = outcome.records[-1].env_steps_total if outcome.records else 0
    elif cfg.method in A2D_METHODS:
        state = None
        if resume_from is not None:
            state, rng = restore_a2d_state(resume_from, pair, cfg)
            logger.info("Resuming A2D from %s at iteration %s", resume_from, state.iteration)

        def record_and_checkpoint(row: MetricsRecord, current) -> None:
            record(row)
            save_a2d_state(out / "last.json", current, cfg, rng)

        result = a2d_train(pair, cfg, rng, state=state, callback=record_and_checkpoint)
        save_checkpoint(out / "best.json", nets=result.state.nets(), iteration=result.state.iteration, config=config_dump)
        best, steps = result.best_deterministic_return, result.state.env_steps
    else:
        raise ConfigurationError("method", f"unknown method {cfg.method!r}")

    final = outcome.records[-1].to_json_dict() if outcome.records else None
    outcome.summary = {
        "method": cfg.method,
        "env": cfg.env,
        "seed": cfg.seed,
        "env_steps_total": steps,
        "evaluations": len(outcome.records),
        "best_deterministic_return": best,
        "final": final,
    }
    _write_json(out / "summary.json", outcome.summary)
    return _finish(outcome)


def _finish(outcome: RunOutcome) -> RunOutcome:
    if settings.METRICS_TEXTFILE:
        dump_textfile(settings.METRICS_TEXTFILE)
    flush_tracing()
    logger.info("Run finished; artifacts in %s", outcome.output_dir)
    return outcome


@dataclass(frozen=True)
class SweepRow:
    lam: float
    seeds: tuple[int, ...]
    deterministic_returns: tuple[float | None, ...]
    buffer_kls: tuple[float | None, ...]

    @staticmethod
    def _median(values: tuple[float | None, ...]) -> float | None:
        present = [v for v in values if v is not None]
        return float(median(present)) if present else None

    @property
    def median_return(self) -> float | None:
        return self._median(self.deterministic_returns)

    @property
    def median_buffer_kl(self) -> float | None:
        return self._median(self.buffer_kls)

    def to_dict(self) -> dict[str, Any]:
        return {
            "lambda": self.lam,
            "seeds": list(self.seeds),
            "deterministic_returns": list(self.deterministic_returns),
            "buffer_kls": list(self.buffer_kls),
            "median_deterministic_return": self.median_return,
            "median_buffer_kl": self.median_buffer_kl,
        }


def format_sweep_table(rows: Sequence[SweepRow]) -> str:
    def cell(value: float | None) -> str:
        return "-" if value is None else f"{value:.4f}"

    lines = [f"{'lambda':>8}  {'median return':>14}  {'median buffer KL':>17}"]
    lines += [f"{row.lam:>8.2f}  {cell(row.median_return):>14}  {cell(row.median_buffer_kl):>17}" for row in rows]
    return "\n".join(lines)


def sweep_lambda(
    base: RunConfig, values: Sequence[float] = LAMBDA_SWEEP, *, seeds: Sequence[int] | None = None
) -> list[SweepRow]:
    """Run the GAE-advantage A2D variant once per (lambda, seed) and summarize the final evaluations."""
    if base.method != "a2d":
        raise ConfigurationError("sweep_method", "the lambda sweep runs the GAE-advantage variant (method 'a2d')")
    if base.env != "tiger_door_2":
        logger.warning("Lambda sweep on %s; the reference sweep uses tiger_door_2", base.env)
    seeds = tuple(seeds) if seeds is not None else (base.seed,)
    root = Path(base.output_dir or Path(settings.A2D_OUTPUT_ROOT) / f"sweep-{base.env}")
    rows: list[SweepRow] = []
    for lam in values:
        returns: list[float | None] = []
        kls: list[float | None] = []
        for seed in seeds:
            cfg = base.model_copy(update={"lam": lam, "seed": seed, "output_dir": str(root / f"lambda-{lam:g}" / f"seed{seed}")})
            outcome = run(cfg)
            final = outcome.records[-1] if outcome.records else None
            returns.append(final.deterministic_return if final else None)
            kls.append(final.buffer_kl if final else None)
        rows.append(SweepRow(lam=float(lam), seeds=seeds, deterministic_returns=tuple(returns), buffer_kls=tuple(kls)))
    root.mkdir(parents=True, exist_ok=True)
    _write_json(root / "sweep.json", [row.to_dict() for row in rows])
    (root / "sweep.txt").write_text(format_sweep_table(rows) + "\n", encoding="utf-8")
    return rows


def evaluate_checkpoint(
    path: str | Path, *, n_interactions: int = 2000, seed: int = 0, env: str | None = None
) -> dict[str, Any]:
    """Evaluate the trainee (or RL policy) stored in a checkpoint with the shared protocol."""
    checkpoint = load_checkpoint(path)
    name = next((n for n in ("trainee", "policy", "expert") if n in checkpoint.nets), None)
    if name is None:
        raise ConfigurationError("checkpoint_policy", f"{path} holds no policy network")
    env = env or checkpoint.config.get("env")
    if env is None:
        raise ConfigurationError("checkpoint_env", "pass --env; the checkpoint does not name its environment")
    window = int(checkpoint.config.get("window", 1))
    policy = checkpoint.build_net(name)
    result = evaluate(policy, make_named_pair(env), n_interactions, np.random.default_rng(seed), window=window)
    return {
        "checkpoint": str(path),
        "network": name,
        "env": env,
        "episodes": result.episodes,
        "interactions": result.interactions,
        **result.record_fields(),
    }
