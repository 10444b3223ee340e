from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from app.core.errors import InvalidArgumentError
from app.domains.envpair.belief import belief_dim
from app.domains.envpair.models import ProcessPair
from app.domains.envpair.sampling import parallel_rollout
from app.domains.training.schemas import MetricsRecord, RunConfig
from app.ml.estimators import gae, normalize_advantages, shape_with_entropy
from app.ml.nets import CategoricalPolicyNet, InputDomain, ValueNet, seed_from
from app.ml.optim import make_adam
from app.ml.trpo import PolicyBatch, fit_value, trpo_step
from app.observability.metrics import env_steps_total, iteration_duration_seconds, iterations_total, observe_duration
from app.observability.tracing import span
from app.services.evaluation import EvaluationTracker, evaluate

logger = logging.getLogger(__name__)

# (policy input, value input) per baseline; rl_asym pairs a belief policy with a state critic.
RL_DOMAINS: dict[str, tuple[InputDomain, InputDomain]] = {
    "rl_mdp": ("state", "state"),
    "rl_pomdp": ("belief", "belief"),
    "rl_asym": ("belief", "state"),
}


@dataclass
class RlResult:
    policy: CategoricalPolicyNet
    value: ValueNet
    records: list[MetricsRecord]
    best_deterministic_return: float | None
    env_steps: int


def _width(pair: ProcessPair, domain: InputDomain, window: int) -> int:
    return pair.state_dim if domain == "state" else belief_dim(pair.obs_dim, window, pair.num_actions)


def rl_train(
    pair: ProcessPair,
    cfg: RunConfig,
    rng: np.random.Generator,
    *,
    callback: Callable[[MetricsRecord], None] | None = None,
) -> RlResult:
    """TRPO with a GAE critic; the method picks which inputs the policy and the critic read."""
    cfg = cfg.resolved()
    if cfg.method not in RL_DOMAINS:
        raise InvalidArgumentError("method", f"{cfg.method!r} is not an RL baseline")
    policy_domain, value_domain = RL_DOMAINS[cfg.method]
    policy = CategoricalPolicyNet(
        _width(pair, policy_domain, cfg.window),
        pair.num_actions,
        input_domain=policy_domain,
        hidden=cfg.hidden,
        activation=cfg.activation,
        seed=seed_from(rng),
    )
    value = ValueNet(
        _width(pair, value_domain, cfg.window),
        input_domain=value_domain,
        hidden=cfg.hidden,
        activation=cfg.activation,
        seed=seed_from(rng),
    )
    value_optimizer = make_adam(value.parameters(), lr=cfg.value_lr, l2=cfg.l2)
    tracker = EvaluationTracker.for_run(pair, cfg, nets={"policy": policy})
    records: list[MetricsRecord] = []
    env_steps = 0
    logger.info("%s on %s: seed %s, lambda %.2f", cfg.method, cfg.env, cfg.seed, cfg.lam)

    for iteration in range(cfg.iterations):
        with span("rl.iteration", iteration=iteration, env=cfg.env), observe_duration(
            iteration_duration_seconds.labels(method=cfg.method)
        ):
            batch = parallel_rollout(pair, policy, cfg.batch_size, rng, window=cfg.window, workers=cfg.workers)
            inputs = policy.select_inputs(batch.state_vecs, batch.belief_vecs)
            values = value.predict(value.select_inputs(batch.state_vecs, batch.belief_vecs))
            next_values = value.predict(value.select_inputs(batch.next_state_vecs, batch.next_belief_vecs))
            advantages = gae(batch, values, next_values, cfg.gamma, cfg.lam).advantages
            shaped, loss_entropy = advantages, 0.0
            if cfg.entropy_mode == "advantage":
                shaped = shape_with_entropy(advantages, policy, inputs, batch.actions, cfg.entropy_coef)
            else:
                loss_entropy = cfg.entropy_coef
            shaped = normalize_advantages(shaped, enabled=cfg.normalize_advantages)
            report = trpo_step(
                policy,
                PolicyBatch(inputs, batch.actions, shaped, batch.behavior_logp),
                cfg.trust_region,
                rng,
                entropy_coef=loss_entropy,
            )
            losses = fit_value(
                value,
                batch,
                cfg.gamma,
                rng=rng,
                optimizer=value_optimizer,
                lr=cfg.value_lr,
                epochs=cfg.value_epochs,
                minibatches=cfg.value_minibatches,
                l2=cfg.l2,
            )
            env_steps += len(batch)
            env_steps_total.labels(method=cfg.method).inc(len(batch))
            iterations_total.labels(method=cfg.method).inc()

        if not tracker.due(iteration, cfg.iterations):
            continue
        result = evaluate(policy, pair, cfg.eval_interactions, rng, window=cfg.window)
        record = MetricsRecord(
            method=cfg.method,
            env=cfg.env,
            seed=cfg.seed,
            iteration=iteration,
            env_steps_total=env_steps,
            beta=0.0,
            lam=cfg.lam,
            trpo_accepted=report.accepted,
            trpo_kl=max(report.kl, 0.0),
            value_loss=losses[-1] if losses else None,
            **result.record_fields(),
        )
        records.append(record)
        if callback is not None:
            callback(record)
        if tracker.observe(iteration, result.deterministic_return):
            logger.info("%s on %s reached the oracle optimum at iteration %s", cfg.method, cfg.env, iteration)
            break
    tracker.restore_best()
    return RlResult(
        policy=policy, value=value, records=records, best_deterministic_return=tracker.best_return, env_steps=env_steps
    )


def rl_mdp(pair: ProcessPair, cfg: RunConfig, rng: np.random.Generator, **kwargs) -> RlResult:
    return rl_train(pair, cfg.model_copy(update={"method": "rl_mdp"}), rng, **kwargs)


def rl_pomdp(pair: ProcessPair, cfg: RunConfig, rng: np.random.Generator, **kwargs) -> RlResult:
    return rl_train(pair, cfg.model_copy(update={"method": "rl_pomdp"}), rng, **kwargs)


def rl_asym(pair: ProcessPair, cfg: RunConfig, rng: np.random.Generator, **kwargs) -> RlResult:
    return rl_train(pair, cfg.model_copy(update={"method": "rl_asym"}), rng, **kwargs)
