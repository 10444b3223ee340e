from __future__ import annotations

import logging
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.core.config import settings
from app.domains.envpair.models import LAYOUTS
from app.ml.trpo import TrustRegionConfig

logger = logging.getLogger(__name__)

METRICS_SCHEMA_VERSION = 1
LAMBDA_SWEEP = (0.0, 0.25, 0.5, 0.75, 0.9, 1.0)

Method = Literal["rl_mdp", "rl_pomdp", "rl_asym", "ail", "a2d", "a2d_q", "oracle"]
BetaSchedule = Literal["multiplicative", "immediate_zero"]
EntropyMode = Literal["advantage", "surrogate"]

A2D_METHODS = frozenset({"a2d", "a2d_q"})
RL_METHODS = frozenset({"rl_mdp", "rl_pomdp", "rl_asym"})
# Tiger Door pairs with the goal one or more steps past the doors; A2D uses
# lighter regularization and a tighter trust region on them.
DOOR_STUDY_ENVS = frozenset({"tiger_door_1", "tiger_door_2", "tiger_door_3"})
DOOR_STUDY_MAX_KL = 1e-3


class RunConfig(BaseModel):
    """One experiment. Unset (``None``) fields are filled per method by :meth:`resolved`."""

    model_config = ConfigDict(extra="forbid", populate_by_name=True, validate_assignment=True)

    method: Method
    env: str
    seed: int = Field(default=0, ge=0)
    gamma: float = Field(default=0.995, gt=0, lt=1)
    lam: float | None = Field(default=None, alias="lambda", ge=0, le=1)
    beta0: float = Field(default=1.0, ge=0, le=1)
    beta_schedule: BetaSchedule | None = None
    beta_decay: float = Field(default=0.8, gt=0, le=1)
    entropy_coef: float | None = Field(default=None, ge=0)
    entropy_mode: EntropyMode | None = None
    batch_size: int = Field(default=2000, ge=1)
    buffer_capacity: int = Field(default=5000, ge=1)
    value_lr: float = Field(default=7e-4, gt=0)
    q_lr: float = Field(default=3e-4, gt=0)
    trainee_lr: float = Field(default=3e-4, gt=0)
    l2: float = Field(default=1e-3, ge=0)
    value_epochs: int = Field(default=25, ge=0)
    value_minibatches: int = Field(default=32, ge=1)
    ail_batch_size: int = Field(default=64, ge=1)
    ail_epochs: int = Field(default=2, ge=0)
    trust_region: TrustRegionConfig = Field(default_factory=TrustRegionConfig)
    iterations: int = Field(default=300, ge=0)
    eval_every: int = Field(default=5, ge=1)
    eval_interactions: int = Field(default=2000, ge=0)
    early_stop_evals: int = Field(default=10, ge=0)
    lambda_anneal: bool = False
    window: int = Field(default=1, ge=1)
    hidden: tuple[int, ...] = (64, 64)
    activation: Literal["tanh", "relu"] = "tanh"
    normalize_advantages: bool = True
    max_importance_weight: float | None = Field(default=None, gt=0)
    output_dir: str | None = None
    expert_checkpoint: str | None = None
    use_oracle_expert: bool = False
    workers: int | None = Field(default=None, ge=1)

    @field_validator("env")
    @classmethod
    def validate_env(cls, v: str) -> str:
        value = v.strip()
        if value not in LAYOUTS:
            raise ValueError(f"env must be one of {sorted(LAYOUTS)}")
        return value

    @field_validator("hidden")
    @classmethod
    def validate_hidden(cls, v: tuple[int, ...]) -> tuple[int, ...]:
        if not v or any(size < 1 for size in v):
            raise ValueError("hidden must list positive layer widths")
        return v

    @model_validator(mode="after")
    def validate_method_requirements(self) -> RunConfig:
        if self.method == "ail" and not (self.expert_checkpoint or self.use_oracle_expert):
            raise ValueError("method 'ail' needs expert_checkpoint or use_oracle_expert=true")
        if self.method == "a2d_q" and self.beta_schedule == "multiplicative" and self.beta0 > 0:
            logger.warning("Q-based advantages assume beta = 0; multiplicative annealing from %.2f mixes in the expert", self.beta0)
        return self

    def resolved(self) -> RunConfig:
        """Copy with every method default filled in, so the config alone reproduces the run."""
        updates: dict[str, object] = {}
        door_study = self.method in A2D_METHODS and self.env in DOOR_STUDY_ENVS
        if self.lam is None:
            if door_study:
                updates["lam"] = 0.5
            else:
                updates["lam"] = 0.9 if self.method == "a2d" and self.env == "frozen_lake" else 0.95
        if self.entropy_mode is None:
            updates["entropy_mode"] = "surrogate" if door_study else "advantage"
        if door_study and "trust_region" not in self.model_fields_set:
            updates["trust_region"] = self.trust_region.model_copy(update={"max_kl": DOOR_STUDY_MAX_KL})
        if self.entropy_coef is None:
            if door_study:
                updates["entropy_coef"] = 0.02
            elif self.method in A2D_METHODS:
                updates["entropy_coef"] = 10.0
            elif self.method in RL_METHODS:
                updates["entropy_coef"] = 1.0
            else:
                updates["entropy_coef"] = 0.0
        if self.beta_schedule is None:
            updates["beta_schedule"] = "multiplicative" if self.method == "a2d" else "immediate_zero"
        if self.workers is None:
            updates["workers"] = settings.ROLLOUT_WORKERS
        if self.output_dir is None:
            updates["output_dir"] = str(Path(settings.A2D_OUTPUT_ROOT) / f"{self.method}-{self.env}-seed{self.seed}")
        return self.model_copy(update=updates)


class MetricsRecord(BaseModel):
    """One metrics.jsonl row; fields a method does not produce stay ``None``."""

    model_config = ConfigDict(populate_by_name=True)

    schema_version: Literal[1] = METRICS_SCHEMA_VERSION
    method: Method
    env: str
    seed: int
    iteration: int
    env_steps_total: int
    beta: float
    lam: float | None = Field(default=None, alias="lambda")
    stochastic_return_mean: float | None = None
    stochastic_return_std: float | None = None
    deterministic_return: float | None = None
    buffer_kl: float | None = None
    expert_return_probe: float | None = None
    max_importance_weight: float | None = None
    trpo_accepted: bool | None = None
    trpo_kl: float | None = None
    value_loss: float | None = None
    q_loss: float | None = None

    def to_json_dict(self) -> dict[str, object]:
        return self.model_dump(mode="json", by_alias=True)
