"""
pomp - command-line entry point.

    pomp <command> --config PATH [--seed INT] [--paths INT] [--output-dir DIR]
                   [--log-format json|human] [--log-level LEVEL]

Exit codes: 0 every check passed, 1 a check failed or a numerical error
occurred, 2 the invocation or the config is invalid.
"""

import logging
from pathlib import Path
from typing import Callable, Dict, Optional

import typer
from rich import box
from rich.console import Console
from rich.table import Table

from src import __version__
from src.cli.bench import lq_bench
from src.cli.commands import (
    CommandOutcome,
    RunContext,
    build_context,
    grad_check,
    optimize,
    simulate,
    verify_mp,
)
from src.data.exceptions import ConfigError, PompError
from src.observability.logging import clear_run_context, set_run_context, setup_logging
from src.observability.metrics import get_metrics
from src.observability.settings import get_settings
from src.observability.tracing import initialize_tracing, is_tracing_initialized
from src.schemas.config import parse_config

logger = logging.getLogger("pomp.cli")

EXIT_PASS = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

COMMANDS: Dict[str, Callable[[RunContext], CommandOutcome]] = {
    "simulate": simulate,
    "grad-check": grad_check,
    "optimize": optimize,
    "verify-mp": verify_mp,
    "lq-bench": lq_bench,
}

app = typer.Typer(
    name="pomp",
    help="Monte-Carlo maximum principle toolkit for partially observed FBSDEs with jumps.",
    add_completion=False,
    no_args_is_help=True,
)

console = Console(stderr=True)

ConfigOption = typer.Option(..., "--config", "-c", help="Experiment config (JSON)")
SeedOption = typer.Option(None, "--seed", min=0, help="Override monte_carlo.seed")
PathsOption = typer.Option(None, "--paths", min=2, help="Override monte_carlo.paths")
OutputOption = typer.Option(None, "--output-dir", help="Override outputs.directory")
LogFormatOption = typer.Option(None, "--log-format", help="json or human (default POMP_LOG_FORMAT)")
LogLevelOption = typer.Option(None, "--log-level", help="Logging level (default POMP_LOG_LEVEL)")


def render_outcome(outcome: CommandOutcome) -> None:
    table = Table(title=f"pomp {outcome.command}", box=box.ROUNDED, header_style="dim",
                  border_style="dim")
    table.add_column("Check", style="white")
    table.add_column("Value", justify="right")
    table.add_column("", justify="left")
    for row in outcome.rows:
        status = "" if row.passed is None else (
            "[bright_green]pass[/bright_green]" if row.passed else "[red]FAIL[/red]")
        table.add_row(row.name, row.value, status)
    console.print(table)
    verdict = "[bold bright_green]PASS[/bold bright_green]" if outcome.passed \
        else "[bold red]FAIL[/bold red]"
    console.print(f"{outcome.command}: {verdict}")


def execute(command: str, config_path: Path, seed: Optional[int], paths: Optional[int],
            output_dir: Optional[str], log_format: Optional[str], log_level: Optional[str]) -> int:
    """Run one command end to end and return its exit status."""
    settings = get_settings()
    fmt = log_format or settings.log_format
    if fmt not in ("json", "human"):
        console.print(f"[red]error[/red]: --log-format must be 'json' or 'human', got '{fmt}'")
        return EXIT_USAGE
    level = (log_level or settings.log_level).upper()
    if not isinstance(getattr(logging, level, None), int):
        console.print(f"[red]error[/red]: unknown log level '{level}'")
        return EXIT_USAGE
    setup_logging(level=level, format_type=fmt, environment=settings.environment)
    if settings.tracing_enabled and not is_tracing_initialized():
        initialize_tracing()

    try:
        config = parse_config(config_path).with_overrides(seed=seed, paths=paths,
                                                          output_dir=output_dir)
        set_run_context(command, config.config_hash(), config.monte_carlo.seed)
        ctx = build_context(config, command, config_path, workers=settings.workers)
        logger.info(f"Running {command}", extra={
            "event_type": "command_start",
            "paths": ctx.paths,
            "steps": ctx.grid.N,
            "problem": ctx.spec.name,
        })
        outcome = COMMANDS[command](ctx)
    except ConfigError as e:
        console.print(f"[red]config error[/red]: {e}")
        clear_run_context()
        return EXIT_USAGE
    except PompError as e:
        logger.error(f"{command} failed: {e}",
                     extra={"event_type": "command_error", "error_type": type(e).__name__})
        console.print(f"[red]{type(e).__name__}[/red]: {e}")
        clear_run_context()
        return EXIT_FAILURE
    finally:
        if settings.metrics_file:
            get_metrics().write_textfile(settings.metrics_file)

    render_outcome(outcome)
    if outcome.headline:
        typer.echo(outcome.headline)
    logger.info(f"{command} finished", extra={
        "event_type": "command_end",
        "passed": outcome.passed,
        "artifacts": [str(p) for p in ctx.writer.written],
    })
    clear_run_context()
    return EXIT_PASS if outcome.passed else EXIT_FAILURE


def _command(name: str, summary: str) -> None:
    def handler(
        config: Path = ConfigOption,
        seed: Optional[int] = SeedOption,
        paths: Optional[int] = PathsOption,
        output_dir: Optional[str] = OutputOption,
        log_format: Optional[str] = LogFormatOption,
        log_level: Optional[str] = LogLevelOption,
    ) -> None:
        raise typer.Exit(execute(name, config, seed, paths, output_dir, log_format, log_level))

    handler.__doc__ = summary
    app.command(name)(handler)


_command("simulate", "Simulate forward paths; rho-martingale summary and BSDE diagnostics.")
_command("grad-check", "Adjoint directional derivatives against common-random-number differences.")
_command("optimize", "Projected gradient descent on the policy parameters.")
_command("verify-mp", "Necessary and sufficient condition report for the configured policy.")
_command("lq-bench", "Acceptance suite on the scalar linear-quadratic problem.")


@app.command("version")
def version() -> None:
    """Print the package version."""
    typer.echo(__version__)


def main() -> None:
    app()
