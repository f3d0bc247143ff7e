"""
pomp-core Observability - Prometheus Metrics

Run-level counters and timings for batch experiments. Metrics live on a
private CollectorRegistry and are written in text exposition format at the
end of a CLI run when POMP_METRICS_FILE is set.

Key Metrics:
- paths simulated, regressions by stage, Picard sweeps
- optimizer iterations by outcome
- check outcomes by check name
- stage durations
"""

from typing import Optional

from prometheus_client import (
    CollectorRegistry,
    Counter,
    Gauge,
    Histogram,
    generate_latest,
    write_to_textfile,
)


class MetricsRegistry:
    """Metric definitions plus helpers for recording pomp operations."""

    def __init__(self, registry: Optional[CollectorRegistry] = None):
        self.registry = registry or CollectorRegistry()

        # === Simulation ===
        self.paths_simulated = Counter(
            'pomp_paths_simulated_total',
            'Forward paths simulated',
            registry=self.registry
        )

        self.regressions = Counter(
            'pomp_regressions_total',
            'Least-squares regressions solved',
            ['stage'],
            registry=self.registry
        )

        self.picard_sweeps = Counter(
            'pomp_picard_sweeps_total',
            'Adjoint Picard sweeps',
            registry=self.registry
        )

        self.stage_duration = Histogram(
            'pomp_stage_duration_seconds',
            'Wall time of a numerical stage',
            ['stage'],
            registry=self.registry,
            buckets=[0.01, 0.05, 0.1, 0.5, 1.0, 5.0, 15.0, 60.0, 300.0]
        )

        # === Optimization ===
        self.optimizer_iterations = Counter(
            'pomp_optimizer_iterations_total',
            'Optimizer iterations by outcome',
            ['outcome'],
            registry=self.registry
        )

        self.last_cost = Gauge(
            'pomp_last_cost',
            'Most recent cost estimate',
            registry=self.registry
        )

        self.last_residual = Gauge(
            'pomp_last_necessary_residual',
            'Most recent necessary-condition residual',
            registry=self.registry
        )

        # === Checks & errors ===
        self.checks = Counter(
            'pomp_checks_total',
            'Acceptance and diagnostic checks by result',
            ['check', 'result'],
            registry=self.registry
        )

        self.errors_total = Counter(
            'pomp_errors_total',
            'Errors by type and stage',
            ['error_type', 'stage'],
            registry=self.registry
        )

    def record_paths(self, count: int) -> None:
        self.paths_simulated.inc(count)

    def record_regressions(self, stage: str, count: int = 1) -> None:
        self.regressions.labels(stage=stage).inc(count)

    def record_picard_sweep(self) -> None:
        self.picard_sweeps.inc()

    def record_stage_duration(self, stage: str, seconds: float) -> None:
        self.stage_duration.labels(stage=stage).observe(seconds)

    def record_iteration(self, accepted: bool, cost: float, residual: float) -> None:
        self.optimizer_iterations.labels(outcome="accepted" if accepted else "rejected").inc()
        self.last_cost.set(cost)
        self.last_residual.set(residual)

    def record_check(self, check: str, passed: bool) -> None:
        self.checks.labels(check=check, result="pass" if passed else "fail").inc()

    def record_error(self, error_type: str, stage: str) -> None:
        self.errors_total.labels(error_type=error_type, stage=stage).inc()

    def export_metrics(self) -> bytes:
        return generate_latest(self.registry)

    def write_textfile(self, path: str) -> None:
        write_to_textfile(path, self.registry)


_metrics_instance: Optional[MetricsRegistry] = None


def get_metrics() -> MetricsRegistry:
    global _metrics_instance
    if _metrics_instance is None:
        _metrics_instance = MetricsRegistry()
    return _metrics_instance


def reset_metrics() -> None:
    """Reset global metrics instance (useful for testing)."""
    global _metrics_instance
    _metrics_instance = None
