from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

from app.core.errors import CheckpointError, DimensionError
from app.domains.envpair.belief import belief_dim
from app.domains.envpair.models import ProcessPair, TrajectoryBatch
from app.domains.envpair.sampling import parallel_rollout
from app.domains.training.schemas import MetricsRecord, RunConfig
from app.ml.estimators import gae, importance_weights, mixture_values, normalize_advantages, shape_with_entropy
from app.ml.nets import CategoricalPolicyNet, MlpNet, QNet, ValueNet, seed_from
from app.ml.optim import make_adam
from app.ml.trpo import PolicyBatch, fit_q, fit_value, trpo_step
from app.observability.metrics import buffer_kl as buffer_kl_gauge
from app.observability.metrics import env_steps_total, iteration_duration_seconds, iterations_total, observe_duration
from app.observability.tracing import span
from app.services.checkpoints import Checkpoint, load_checkpoint, save_checkpoint
from app.services.evaluation import EvaluationTracker, evaluate, expert_return_probe
from app.services.imitation import MixtureBehavior, MixtureSchedule, ReplayBuffer, ail_step, buffer_kl, buffer_update

logger = logging.getLogger(__name__)

Q_VARIANT_WARNING = "Q-based advantages assume beta = 0; the mixture still includes the expert at beta0=%.2f"


@dataclass
class LambdaAnnealer:
    """Linear GAE-lambda decay that starts once the buffer KL stops improving."""

    initial: float
    enabled: bool = False
    patience: int = 10
    step: float = 0.05
    floor: float = 0.0
    tolerance: float = 1e-3
    current: float = field(init=False)
    fired: bool = False
    best: float | None = None
    stale: int = 0

    def __post_init__(self) -> None:
        self.current = self.initial

    def observe(self, divergence: float) -> None:
        if not self.enabled or self.fired:
            return
        if self.best is None or divergence < self.best - self.tolerance:
            self.best, self.stale = divergence, 0
            return
        self.stale += 1
        if self.stale >= self.patience:
            self.fired = True
            logger.info("Buffer KL plateaued at %.4f; annealing lambda from %.3f", self.best, self.current)

    def advance(self) -> float:
        if self.fired:
            self.current = max(self.floor, self.current - self.step)
        return self.current

    def to_dict(self) -> dict[str, Any]:
        return {"current": self.current, "fired": self.fired, "best": self.best, "stale": self.stale}

    def load(self, payload: dict[str, Any]) -> None:
        self.current = float(payload["current"])
        self.fired = bool(payload["fired"])
        self.best = payload["best"]
        self.stale = int(payload["stale"])


@dataclass(eq=False)
class A2dState:
    expert: CategoricalPolicyNet
    trainee: CategoricalPolicyNet
    expert_value: ValueNet
    trainee_value: ValueNet
    q_net: QNet | None
    schedule: MixtureSchedule
    buffer: ReplayBuffer
    optimizers: dict[str, torch.optim.Optimizer]
    annealer: LambdaAnnealer
    iteration: int = 0
    env_steps: int = 0
    evaluation: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.expert.input_domain != "state" or self.expert_value.input_domain != "state":
            raise DimensionError("expert_domain", "the expert and its value net read state vectors")
        if self.trainee.input_domain != "belief" or self.trainee_value.input_domain != "belief":
            raise DimensionError("trainee_domain", "the trainee and its value net read belief vectors")

    def nets(self) -> dict[str, MlpNet]:
        nets: dict[str, MlpNet] = {
            "expert": self.expert,
            "trainee": self.trainee,
            "expert_value": self.expert_value,
            "trainee_value": self.trainee_value,
        }
        if self.q_net is not None:
            nets["q"] = self.q_net
        return nets


def a2d_q_variant_toggle(cfg: RunConfig) -> RunConfig:
    """Switch between GAE advantages on the mixture value and Q(b, a) - V(b) advantages."""
    method = "a2d_q" if cfg.method == "a2d" else "a2d"
    toggled = cfg.model_copy(update={"method": method})
    if method == "a2d_q" and toggled.beta0 > 0 and toggled.beta_schedule != "immediate_zero":
        logger.warning(Q_VARIANT_WARNING, toggled.beta0)
    return toggled


def _build_optimizers(
    cfg: RunConfig, trainee: CategoricalPolicyNet, expert_value: ValueNet, trainee_value: ValueNet, q_net: QNet | None
) -> dict[str, torch.optim.Optimizer]:
    optimizers = {
        "trainee": make_adam(trainee.parameters(), lr=cfg.trainee_lr, l2=cfg.l2),
        "expert_value": make_adam(expert_value.parameters(), lr=cfg.value_lr, l2=cfg.l2),
        "trainee_value": make_adam(trainee_value.parameters(), lr=cfg.value_lr, l2=cfg.l2),
    }
    if q_net is not None:
        optimizers["q"] = make_adam(q_net.parameters(), lr=cfg.q_lr, l2=cfg.l2)
    return optimizers


def init_a2d_state(pair: ProcessPair, cfg: RunConfig, rng: np.random.Generator) -> A2dState:
    cfg = cfg.resolved()
    width = belief_dim(pair.obs_dim, cfg.window, pair.num_actions)
    net_args = {"hidden": cfg.hidden, "activation": cfg.activation}
    expert = CategoricalPolicyNet(pair.state_dim, pair.num_actions, input_domain="state", seed=seed_from(rng), **net_args)
    trainee = CategoricalPolicyNet(width, pair.num_actions, input_domain="belief", seed=seed_from(rng), **net_args)
    expert_value = ValueNet(pair.state_dim, input_domain="state", seed=seed_from(rng), **net_args)
    trainee_value = ValueNet(width, input_domain="belief", seed=seed_from(rng), **net_args)
    q_net = None
    if cfg.method == "a2d_q":
        q_net = QNet(width, pair.num_actions, input_domain="belief", seed=seed_from(rng), **net_args)
    return A2dState(
        expert=expert,
        trainee=trainee,
        expert_value=expert_value,
        trainee_value=trainee_value,
        q_net=q_net,
        schedule=MixtureSchedule(cfg.beta0, cfg.beta_schedule, cfg.beta_decay),
        buffer=ReplayBuffer(cfg.buffer_capacity, state_dim=pair.state_dim, belief_width=width, num_actions=pair.num_actions),
        optimizers=_build_optimizers(cfg, trainee, expert_value, trainee_value, q_net),
        annealer=LambdaAnnealer(cfg.lam, enabled=cfg.lambda_anneal),
    )


def _final(losses: list[float]) -> float | None:
    return losses[-1] if losses else None


def expert_policy_batch(
    expert: CategoricalPolicyNet, batch: TrajectoryBatch, advantages: np.ndarray, cfg: RunConfig
) -> tuple[PolicyBatch, np.ndarray, float]:
    """Trust-region batch for the expert, its importance weights and the surrogate entropy coefficient.

    With ``old_logp`` set to the behavior log-probs the TRPO surrogate
    ``mean(exp(log pi_theta - old_logp) * A)`` is the importance-weighted
    advantage; a weight cap raises ``old_logp`` where the ratio would exceed it.
    """
    cfg = cfg.resolved()
    steps = np.arange(len(batch))
    expert_logp = expert.distribution(batch.state_vecs).log_probs[steps, batch.actions]
    weights = importance_weights(expert_logp, batch.behavior_logp, cap=cfg.max_importance_weight)
    old_logp = batch.behavior_logp
    if cfg.max_importance_weight is not None:
        old_logp = np.maximum(old_logp, expert_logp - np.log(cfg.max_importance_weight))
    shaped, loss_entropy = advantages, 0.0
    if cfg.entropy_mode == "advantage":
        shaped = shape_with_entropy(advantages, expert, batch.state_vecs, batch.actions, cfg.entropy_coef)
    else:
        loss_entropy = cfg.entropy_coef
    shaped = normalize_advantages(shaped, enabled=cfg.normalize_advantages)
    return PolicyBatch(batch.state_vecs, batch.actions, shaped, old_logp), weights, loss_entropy


def a2d_iteration(
    state: A2dState, pair: ProcessPair, cfg: RunConfig, rng: np.random.Generator
) -> tuple[A2dState, MetricsRecord]:
    """One expert trust-region step through the trainee's occupancy followed by one imitation step."""
    cfg = cfg.resolved()
    iteration = state.iteration
    beta = state.schedule.beta_at(iteration)
    lam = state.annealer.advance()
    expert, trainee = state.expert, state.trainee

    batch = parallel_rollout(
        pair, MixtureBehavior(beta, expert, trainee), cfg.batch_size, rng, window=cfg.window, workers=cfg.workers
    )
    buffer_update(state.buffer, batch, expert)

    trainee_values = state.trainee_value.predict(batch.belief_vecs)
    if state.q_net is None:
        values = mixture_values(beta, state.expert_value.predict(batch.state_vecs), trainee_values)
        next_values = mixture_values(
            beta, state.expert_value.predict(batch.next_state_vecs), state.trainee_value.predict(batch.next_belief_vecs)
        )
        advantages = gae(batch, values, next_values, cfg.gamma, lam).advantages
    else:
        advantages = state.q_net.predict(batch.belief_vecs, batch.actions) - trainee_values

    policy_batch, weights, loss_entropy = expert_policy_batch(expert, batch, advantages, cfg)
    report = trpo_step(expert, policy_batch, cfg.trust_region, rng, entropy_coef=loss_entropy)

    fit_args = {"rng": rng, "epochs": cfg.value_epochs, "minibatches": cfg.value_minibatches, "l2": cfg.l2}
    expert_losses = fit_value(
        state.expert_value, batch, cfg.gamma, optimizer=state.optimizers["expert_value"], lr=cfg.value_lr, **fit_args
    )
    trainee_losses = fit_value(
        state.trainee_value, batch, cfg.gamma, optimizer=state.optimizers["trainee_value"], lr=cfg.value_lr, **fit_args
    )
    q_loss = None
    if state.q_net is not None:
        bootstrap = state.trainee_value.predict(batch.next_belief_vecs)
        q_loss = _final(
            fit_q(
                state.q_net, batch, cfg.gamma, bootstrap=bootstrap, optimizer=state.optimizers["q"], lr=cfg.q_lr, **fit_args
            )
        )

    ail_step(
        state.buffer, trainee, state.optimizers["trainee"], rng=rng, batch_size=cfg.ail_batch_size, epochs=cfg.ail_epochs
    )
    divergence = buffer_kl(state.buffer, trainee)
    state.annealer.observe(divergence)

    state.iteration += 1
    state.env_steps += len(batch)
    env_steps_total.labels(method=cfg.method).inc(len(batch))
    iterations_total.labels(method=cfg.method).inc()
    buffer_kl_gauge.labels(method=cfg.method, env=cfg.env).set(divergence)

    value_losses = [loss for loss in (_final(expert_losses), _final(trainee_losses)) if loss is not None]
    record = MetricsRecord(
        method=cfg.method,
        env=cfg.env,
        seed=cfg.seed,
        iteration=iteration,
        env_steps_total=state.env_steps,
        beta=beta,
        lam=lam,
        buffer_kl=divergence,
        max_importance_weight=float(weights.max()),
        trpo_accepted=report.accepted,
        trpo_kl=max(report.kl, 0.0),
        value_loss=float(np.mean(value_losses)) if value_losses else None,
        q_loss=q_loss,
    )
    logger.debug(
        "A2D iteration %s: beta=%.4f kl=%.4f trpo=%s max_w=%.3f",
        iteration,
        beta,
        divergence,
        report.status,
        record.max_importance_weight,
    )
    return state, record


def save_a2d_state(path: str | Path, state: A2dState, cfg: RunConfig, rng: np.random.Generator) -> Path:
    return save_checkpoint(
        path,
        nets=state.nets(),
        optimizers=state.optimizers,
        rng=rng,
        iteration=state.iteration,
        config=cfg.resolved().model_dump(mode="json", by_alias=True),
        extra={
            "env_steps": state.env_steps,
            "buffer": state.buffer.to_dict(),
            "annealer": state.annealer.to_dict(),
            "evaluation": state.evaluation,
        },
    )


def restore_a2d_state(
    source: str | Path | Checkpoint, pair: ProcessPair, cfg: RunConfig
) -> tuple[A2dState, np.random.Generator]:
    """Rebuild nets, optimizer moments, buffer and generator exactly as they were saved."""
    checkpoint = source if isinstance(source, Checkpoint) else load_checkpoint(source)
    cfg = cfg.resolved()
    nets = {name: checkpoint.build_net(name) for name in checkpoint.nets}
    try:
        expert, trainee = nets["expert"], nets["trainee"]
        expert_value, trainee_value = nets["expert_value"], nets["trainee_value"]
        extra = checkpoint.extra
        buffer = ReplayBuffer.from_dict(
            extra["buffer"], state_dim=pair.state_dim, belief_width=trainee.in_dim, num_actions=pair.num_actions
        )
    except KeyError as exc:
        raise CheckpointError("corrupt_checkpoint", f"A2D checkpoint is missing {exc}") from exc
    q_net = nets.get("q")
    optimizers = _build_optimizers(cfg, trainee, expert_value, trainee_value, q_net)
    for name, optimizer in optimizers.items():
        checkpoint.restore_optimizer(name, optimizer)
    annealer = LambdaAnnealer(cfg.lam, enabled=cfg.lambda_anneal)
    annealer.load(extra.get("annealer", annealer.to_dict()))
    state = A2dState(
        expert=expert,
        trainee=trainee,
        expert_value=expert_value,
        trainee_value=trainee_value,
        q_net=q_net,
        schedule=MixtureSchedule(cfg.beta0, cfg.beta_schedule, cfg.beta_decay),
        buffer=buffer,
        optimizers=optimizers,
        annealer=annealer,
        iteration=checkpoint.iteration,
        env_steps=int(extra.get("env_steps", 0)),
        evaluation=dict(extra.get("evaluation", {})),
    )
    return state, checkpoint.generator()


@dataclass
class A2dResult:
    state: A2dState
    records: list[MetricsRecord]
    best_deterministic_return: float | None

    @property
    def trainee(self) -> CategoricalPolicyNet:
        return self.state.trainee

    @property
    def expert(self) -> CategoricalPolicyNet:
        return self.state.expert


def a2d_train(
    pair: ProcessPair,
    cfg: RunConfig,
    rng: np.random.Generator,
    *,
    state: A2dState | None = None,
    callback: Callable[[MetricsRecord, A2dState], None] | None = None,
) -> A2dResult:
    """Run A2D up to the iteration budget; the trainee and expert end at their best evaluated parameters."""
    cfg = cfg.resolved()
    state = state or init_a2d_state(pair, cfg, rng)
    tracker = EvaluationTracker.for_run(pair, cfg, nets={"expert": state.expert, "trainee": state.trainee})
    if state.evaluation:
        tracker.load(state.evaluation)
    records: list[MetricsRecord] = []
    logger.info("A2D (%s) on %s: seed %s, lambda %.2f", cfg.method, cfg.env, cfg.seed, cfg.lam)
    while state.iteration < cfg.iterations:
        with span("a2d.iteration", iteration=state.iteration, env=cfg.env), observe_duration(
            iteration_duration_seconds.labels(method=cfg.method)
        ):
            state, record = a2d_iteration(state, pair, cfg, rng)
        if not tracker.due(record.iteration, cfg.iterations):
            continue
        result = evaluate(state.trainee, pair, cfg.eval_interactions, rng, window=cfg.window)
        probe = expert_return_probe(state.expert, pair, window=cfg.window)
        record = record.model_copy(update={**result.record_fields(), "expert_return_probe": probe})
        records.append(record)
        stop = tracker.observe(record.iteration, result.deterministic_return)
        state.evaluation = tracker.to_dict()
        if callback is not None:
            callback(record, state)
        if stop:
            logger.info("A2D on %s reached the oracle optimum; stopping at iteration %s", cfg.env, record.iteration)
            break
    tracker.restore_best()
    logger.info("A2D on %s finished after %s iterations (%s env steps)", cfg.env, state.iteration, state.env_steps)
    return A2dResult(state=state, records=records, best_deterministic_return=tracker.best_return)
