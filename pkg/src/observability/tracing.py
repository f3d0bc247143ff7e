"""
pomp-core Observability - Tracing (OpenTelemetry)

Spans around the heavy numerical stages (simulation, regressions, adjoint
sweeps, optimizer steps) so a slow run can be broken down by stage.

Console export in development, Jaeger when an endpoint is configured. If
initialize_tracing() was never called the global no-op tracer is used, so
the library works unconfigured.
"""

import time
from functools import wraps
from typing import Any, Callable, Dict, Optional

from opentelemetry import trace
from opentelemetry.exporter.jaeger.thrift import JaegerExporter
from opentelemetry.sdk.resources import SERVICE_NAME, Resource
from opentelemetry.sdk.trace import TracerProvider, sampling
from opentelemetry.sdk.trace.export import BatchSpanProcessor, ConsoleSpanExporter
from opentelemetry.trace import Status, StatusCode

from src.observability.metrics import get_metrics
from src.observability.settings import get_settings


class PompTracerProvider:
    """
    Centralized OpenTelemetry configuration.

    Handles:
    - Tracer initialization
    - Exporter configuration (Jaeger, Console)
    - Sampling strategy
    """

    def __init__(
        self,
        service_name: str = "pomp-core",
        environment: str = "development",
        jaeger_endpoint: Optional[str] = None,
        sampling_rate: float = 1.0,
        enable_console_export: bool = False
    ):
        resource = Resource.create({
            SERVICE_NAME: service_name,
            "service.version": "0.1.0",
            "deployment.environment": environment
        })

        if sampling_rate >= 1.0:
            sampler = sampling.ALWAYS_ON
        elif sampling_rate <= 0.0:
            sampler = sampling.ALWAYS_OFF
        else:
            sampler = sampling.TraceIdRatioBased(sampling_rate)

        self.provider = TracerProvider(resource=resource, sampler=sampler)

        if jaeger_endpoint:
            self._setup_jaeger_exporter(jaeger_endpoint)

        if enable_console_export:
            self._setup_console_exporter()

        trace.set_tracer_provider(self.provider)

        self.service_name = service_name
        self.environment = environment

    def _setup_jaeger_exporter(self, endpoint: str) -> None:
        # endpoint format: "host:port"
        agent_host, agent_port = endpoint.split(':')
        exporter = JaegerExporter(agent_host_name=agent_host, agent_port=int(agent_port))
        self.provider.add_span_processor(BatchSpanProcessor(exporter))

    def _setup_console_exporter(self) -> None:
        self.provider.add_span_processor(BatchSpanProcessor(ConsoleSpanExporter()))

    def get_tracer(self, name: str) -> trace.Tracer:
        return self.provider.get_tracer(name)


_tracer_provider: Optional[PompTracerProvider] = None


def initialize_tracing(
    service_name: str = "pomp-core",
    environment: Optional[str] = None,
    jaeger_endpoint: Optional[str] = None,
    sampling_rate: Optional[float] = None
) -> PompTracerProvider:
    """
    Initialize global tracing configuration. Call once per process.

    Arguments left as None come from RuntimeSettings (POMP_ENVIRONMENT,
    POMP_JAEGER_ENDPOINT, POMP_TRACE_SAMPLING_RATE). Spans go to the console
    only in the "development" environment.
    """
    global _tracer_provider

    settings = get_settings()
    environment = environment or settings.environment
    jaeger_endpoint = jaeger_endpoint or settings.jaeger_endpoint
    if sampling_rate is None:
        sampling_rate = settings.trace_sampling_rate

    _tracer_provider = PompTracerProvider(
        service_name=service_name,
        environment=environment,
        jaeger_endpoint=jaeger_endpoint,
        sampling_rate=sampling_rate,
        enable_console_export=environment == "development"
    )
    return _tracer_provider


def is_tracing_initialized() -> bool:
    return _tracer_provider is not None


def get_tracer(name: str) -> trace.Tracer:
    if _tracer_provider is None:
        return trace.get_tracer(name)
    return _tracer_provider.get_tracer(name)


def trace_operation(
    operation_name: str,
    attributes: Optional[Dict[str, Any]] = None
) -> Callable:
    """
    Decorator creating a span around a numerical stage.

    Also feeds the stage duration histogram so durations are available
    without a trace backend.

    Example:
        >>> @trace_operation("solve_state_bsde", {"stage": "state"})
        ... def solve_state_bsde(spec, fwd, ...):
        ...     ...
    """
    def decorator(func: Callable) -> Callable:
        @wraps(func)
        def wrapper(*args, **kwargs):
            tracer = get_tracer(func.__module__)

            with tracer.start_as_current_span(operation_name) as span:
                if attributes:
                    for key, value in attributes.items():
                        span.set_attribute(key, value)

                span.set_attribute("code.function", func.__name__)
                span.set_attribute("code.namespace", func.__module__)

                try:
                    start_time = time.perf_counter()
                    result = func(*args, **kwargs)
                    duration = time.perf_counter() - start_time

                    span.set_attribute("operation.duration_seconds", duration)
                    span.set_status(Status(StatusCode.OK))
                    get_metrics().record_stage_duration(operation_name, duration)

                    return result

                except Exception as e:
                    span.set_status(Status(StatusCode.ERROR, str(e)))
                    span.record_exception(e)
                    get_metrics().record_error(type(e).__name__, operation_name)
                    raise

        return wrapper

    return decorator


def add_span_attributes(attributes: Dict[str, Any]) -> None:
    """Add attributes to the current active span."""
    span = trace.get_current_span()
    if span.is_recording():
        for key, value in attributes.items():
            span.set_attribute(key, value)


def add_span_event(name: str, attributes: Optional[Dict[str, Any]] = None) -> None:
    """Add a timestamped event (e.g. a Picard sweep) to the current span."""
    span = trace.get_current_span()
    if span.is_recording():
        span.add_event(name, attributes or {})
