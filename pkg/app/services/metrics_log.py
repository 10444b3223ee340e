from __future__ import annotations

import json
import logging
from functools import lru_cache
from pathlib import Path
from typing import Any

from jsonschema import Draft202012Validator

from app.core.errors import InvalidArgumentError
from app.domains.training.schemas import MetricsRecord

logger = logging.getLogger(__name__)

SCHEMA_PATH = Path(__file__).resolve().parents[1] / "domains" / "training" / "metrics.schema.json"


@lru_cache(maxsize=1)
def metrics_validator() -> Draft202012Validator:
    return Draft202012Validator(json.loads(SCHEMA_PATH.read_text(encoding="utf-8")))


class MetricsWriter:
    """Append-only metrics.jsonl writer; the run owns the single instance."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.written = 0

    def write(self, record: MetricsRecord) -> None:
        with self.path.open("a", encoding="utf-8") as handle:
            handle.write(json.dumps(record.to_json_dict(), sort_keys=True) + "\n")
        self.written += 1

    __call__ = write


def read_metrics(path: str | Path) -> list[dict[str, Any]]:
    rows: list[dict[str, Any]] = []
    for number, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise InvalidArgumentError("metrics_line", f"line {number} is not JSON: {exc.msg}") from exc
    return rows


def validate_metrics_file(path: str | Path) -> list[str]:
    """Schema errors as ``line N: path: message`` strings; empty when the file is valid."""
    validator = metrics_validator()
    errors: list[str] = []
    for number, row in enumerate(read_metrics(path), start=1):
        for err in validator.iter_errors(row):
            location = ".".join(str(p) for p in err.path) or "<root>"
            errors.append(f"line {number}: {location}: {err.message}")
    if errors:
        logger.warning("Metrics file %s failed validation with %s errors", path, len(errors))
    return errors
