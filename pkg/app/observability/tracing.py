from __future__ import annotations

from collections.abc import Iterator
from contextlib import contextmanager
from typing import Any

from app.core.config import settings

_provider: Any = None
_tracer: Any = None


def setup_tracing(*, service_name: str) -> None:
    """Export spans over OTLP when ``OTEL_ENABLED``; otherwise ``span`` stays a no-op."""
    global _provider, _tracer
    if not settings.OTEL_ENABLED or _provider is not None:
        return

    try:
        from opentelemetry import trace
        from opentelemetry.exporter.otlp.proto.http.trace_exporter import OTLPSpanExporter
        from opentelemetry.sdk.resources import DEPLOYMENT_ENVIRONMENT, SERVICE_NAME, SERVICE_NAMESPACE, Resource
        from opentelemetry.sdk.trace import TracerProvider
        from opentelemetry.sdk.trace.export import BatchSpanProcessor
    except Exception:
        # Tracing is optional; keep runs working without the SDK.
        return

    _provider = TracerProvider(
        resource=Resource.create(
            {
                SERVICE_NAMESPACE: settings.OTEL_SERVICE_NAMESPACE,
                SERVICE_NAME: service_name,
                DEPLOYMENT_ENVIRONMENT: settings.ENVIRONMENT,
            }
        )
    )
    _provider.add_span_processor(BatchSpanProcessor(OTLPSpanExporter(endpoint=settings.OTEL_EXPORTER_OTLP_ENDPOINT)))
    trace.set_tracer_provider(_provider)
    _tracer = _provider.get_tracer("a2d_lab")


def flush_tracing() -> None:
    # CLI runs exit right after training, before the batch processor's timer fires.
    if _provider is not None:
        _provider.force_flush()


@contextmanager
def span(name: str, **attributes: Any) -> Iterator[None]:
    if _tracer is None:
        yield
        return
    with _tracer.start_as_current_span(name, attributes=attributes):
        yield
