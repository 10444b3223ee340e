from __future__ import annotations

from typing import Any, Literal

ErrorKind = Literal["config", "validation", "numeric", "precondition", "unsupported", "checkpoint"]


class LabError(Exception):
    """Base error carrying a structured ``{"kind", "code", "detail"}`` payload."""

    kind: ErrorKind = "validation"

    def __init__(self, code: str, detail: str, **context: Any) -> None:
        super().__init__(f"{code}: {detail}")
        self.code = code
        self.detail = detail
        self.context = context

    def to_dict(self) -> dict[str, Any]:
        payload: dict[str, Any] = {"kind": self.kind, "code": self.code, "detail": self.detail}
        if self.context:
            payload["context"] = self.context
        return payload


class ConfigurationError(LabError):
    kind = "config"


class InvalidArgumentError(LabError):
    kind = "validation"


class DimensionError(InvalidArgumentError):
    pass


class NonFiniteError(LabError):
    kind = "numeric"


class PreconditionError(LabError):
    kind = "precondition"


class UnsupportedPairError(LabError):
    kind = "unsupported"


class CheckpointError(LabError):
    kind = "checkpoint"
