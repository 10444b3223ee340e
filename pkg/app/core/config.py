import logging

from pydantic import model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

_LOG_LEVELS = {"CRITICAL", "ERROR", "WARNING", "INFO", "DEBUG"}


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_file=".env",
        env_ignore_empty=True,
        extra="ignore",
    )

    PROJECT_NAME: str = "A2D Lab"
    ENVIRONMENT: str = "development"
    LOG_LEVEL: str = "INFO"

    # Root for run artifacts when a run config leaves output_dir unset.
    A2D_OUTPUT_ROOT: str = "runs"
    ROLLOUT_WORKERS: int = 1

    ORACLE_OCCUPANCY_EPS: float = 1e-8
    ORACLE_MAX_ENUMERATION: int = 65536
    ORACLE_DENSE_LIMIT: int = 3000

    OTEL_ENABLED: bool = False
    OTEL_EXPORTER_OTLP_ENDPOINT: str = "http://jaeger:4318/v1/traces"
    OTEL_SERVICE_NAMESPACE: str = "a2d-lab"
    METRICS_TEXTFILE: str = ""

    @model_validator(mode="after")
    def validate_runtime_limits(self) -> "Settings":
        if self.ROLLOUT_WORKERS < 1:
            raise ValueError("ROLLOUT_WORKERS must be at least 1.")
        if self.LOG_LEVEL.upper() not in _LOG_LEVELS:
            raise ValueError(f"LOG_LEVEL must be one of {sorted(_LOG_LEVELS)}.")
        if not 0 < self.ORACLE_OCCUPANCY_EPS < 1:
            raise ValueError("ORACLE_OCCUPANCY_EPS must lie in (0, 1).")
        return self

    @property
    def log_level_value(self) -> int:
        return logging.getLevelNamesMapping()[self.LOG_LEVEL.upper()]


settings = Settings()
