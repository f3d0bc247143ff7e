"""
pomp-core Observability - Structured Logging

JSON logs for batch runs, colored human-readable logs for interactive use.
Every record carries the run context (command, config hash, seed) so log
lines can be joined with the artifacts the run produced.
"""

import logging
import sys
from contextvars import ContextVar
from datetime import datetime, timezone
from typing import Any, Dict, Optional, TextIO

from pythonjsonlogger import jsonlogger

# Context of the current CLI run
run_context: ContextVar[Dict[str, Any]] = ContextVar('run_context', default={})


class PompJsonFormatter(jsonlogger.JsonFormatter):
    """
    JSON formatter with pomp-specific fields.

    Adds:
    - timestamp (ISO 8601, UTC)
    - service / environment
    - run context (command, config_hash, seed)
    - level name and source location
    """

    def __init__(self, *args, service_name: str = "pomp-core",
                 environment: str = "development", **kwargs):
        self.service_name = service_name
        self.environment = environment
        super().__init__(*args, **kwargs)

    def add_fields(self, log_record: Dict[str, Any], record: logging.LogRecord,
                   message_dict: Dict[str, Any]) -> None:
        super().add_fields(log_record, record, message_dict)

        log_record['timestamp'] = datetime.now(timezone.utc).isoformat()
        log_record['service'] = self.service_name
        log_record['environment'] = self.environment

        ctx = run_context.get()
        if ctx:
            log_record['run'] = dict(ctx)

        log_record['level'] = record.levelname
        log_record['source'] = {
            'file': record.pathname,
            'line': record.lineno,
            'function': record.funcName
        }


class HumanReadableFormatter(logging.Formatter):
    """
    Terminal formatter with color.

    Example output:
    2026-01-05 10:30:45 | INFO     | pomp.bsde            | Adjoint converged | seed=42
    """

    COLORS = {
        'DEBUG': '\033[36m',
        'INFO': '\033[32m',
        'WARNING': '\033[33m',
        'ERROR': '\033[31m',
        'CRITICAL': '\033[35m',
        'RESET': '\033[0m'
    }

    def format(self, record: logging.LogRecord) -> str:
        color = self.COLORS.get(record.levelname, self.COLORS['RESET'])
        reset = self.COLORS['RESET']

        timestamp = datetime.now(timezone.utc).strftime('%Y-%m-%d %H:%M:%S')
        base = f"{timestamp} | {color}{record.levelname:8}{reset} | {record.name:20} | {record.getMessage()}"

        ctx = run_context.get()
        if ctx and 'seed' in ctx:
            base += f" | seed={ctx['seed']}"

        if record.exc_info:
            base += f"\n{self.formatException(record.exc_info)}"

        return base


def setup_logging(
    level: str = "INFO",
    format_type: str = "json",
    service_name: str = "pomp-core",
    environment: str = "development",
    stream: Optional[TextIO] = None
) -> logging.Logger:
    """
    Configure the root logger.

    Args:
        level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        format_type: "json" or "human"
        service_name: Service identifier stamped on JSON records
        environment: development/testing/production
        stream: Output stream (defaults to stderr so stdout stays clean)

    Returns:
        Configured root logger
    """
    logger = logging.getLogger()
    logger.setLevel(getattr(logging, level.upper()))
    logger.handlers.clear()

    handler = logging.StreamHandler(stream or sys.stderr)
    handler.setLevel(getattr(logging, level.upper()))

    if format_type == "json":
        formatter = PompJsonFormatter(service_name=service_name, environment=environment)
    else:
        formatter = HumanReadableFormatter()

    handler.setFormatter(formatter)
    logger.addHandler(handler)

    return logger


def set_run_context(command: str, config_hash: str, seed: int) -> None:
    """Attach run identity to every subsequent log line in this context."""
    run_context.set({'command': command, 'config_hash': config_hash, 'seed': seed})


def clear_run_context() -> None:
    run_context.set({})


def get_logger(name: str) -> logging.Logger:
    return logging.getLogger(name)


# Convenience functions for structured logging
def log_simulation(logger: logging.Logger, paths: int, steps: int,
                   duration_seconds: float) -> None:
    logger.info(
        "Forward paths simulated",
        extra={
            "event_type": "simulation",
            "paths": paths,
            "steps": steps,
            "duration_seconds": duration_seconds
        }
    )


def log_picard_sweep(logger: logging.Logger, sweep: int, residual: float,
                     tol: float) -> None:
    logger.debug(
        f"Picard sweep {sweep}: residual {residual:.3e}",
        extra={
            "event_type": "picard_sweep",
            "sweep": sweep,
            "residual": residual,
            "tol": tol
        }
    )


def log_regression_failure(logger: logging.Logger, stage: str, step: int,
                           reason: str) -> None:
    logger.error(
        f"Regression failed in {stage} at step {step}",
        extra={
            "event_type": "regression_failure",
            "stage": stage,
            "step": step,
            "reason": reason
        }
    )


def log_optimizer_iteration(logger: logging.Logger, iteration: int, cost: float,
                            residual: float, alpha: float, accepted: bool) -> None:
    logger.info(
        f"Iteration {iteration}: J={cost:.6g} residual={residual:.3e}",
        extra={
            "event_type": "optimizer_iteration",
            "iteration": iteration,
            "cost": cost,
            "residual": residual,
            "alpha": alpha,
            "accepted": accepted
        }
    )


def log_check_result(logger: logging.Logger, check: str, passed: bool,
                     details: Dict[str, Any]) -> None:
    level = logging.INFO if passed else logging.WARNING
    logger.log(
        level,
        f"Check {check}: {'pass' if passed else 'FAIL'}",
        extra={
            "event_type": "check_result",
            "check": check,
            "passed": passed,
            "details": details
        }
    )


# Known Limitations
"""
KNOWN LIMITATIONS:

1. **Context Propagation**: run_context is a ContextVar; worker threads started
   by the path-chunk pool do not inherit it, so per-chunk debug lines carry no
   run fields.

2. **Volume**: DEBUG level logs every Picard sweep and backtracking attempt.
   Keep INFO for desk-scale runs.
"""
