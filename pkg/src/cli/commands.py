"""
Command bodies behind the `pomp` CLI.

Each command takes a RunContext (parsed config, built problem, grid, output
writer) and returns a CommandOutcome; the typer layer turns the outcome
into a summary table and an exit status.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from src.core import optimizer
from src.core.bsde import (
    PicardSettings,
    bayes_identity_gap,
    export_bsde_summary,
    martingale_reconstruction_error,
    solve_cost_bsde,
)
from src.core.export import write_csv
from src.core.forward import (
    ControlPolicy,
    ForwardPath,
    export_paths_csv,
    martingale_summary,
    moment_stability,
)
from src.core.gradient import (
    PolicyEvaluation,
    control_difference,
    control_gradient,
    cost_of,
    directional_derivative_from_delta,
    finite_difference_derivative,
    optimality_report,
    run_policy,
)
from src.core.hamiltonian import finite_diff_check, sample_points
from src.core.noise import NoiseBundle, TimeGrid, sample_noise
from src.core.regression import BasisSpec
from src.data.problem_model import ProblemSpec
from src.observability.logging import log_check_result
from src.observability.metrics import get_metrics
from src.schemas.config import ExperimentConfig
from src.cli.artifacts import ArtifactWriter

logger = logging.getLogger("pomp.cli")


@dataclass
class RunContext:
    config: ExperimentConfig
    spec: ProblemSpec
    grid: TimeGrid
    basis: BasisSpec
    picard: PicardSettings
    writer: ArtifactWriter
    base_dir: Path = Path(".")
    workers: Optional[int] = None
    _noise: Optional[NoiseBundle] = field(default=None, repr=False)

    @property
    def seed(self) -> int:
        return self.config.monte_carlo.seed

    @property
    def paths(self) -> int:
        return self.config.monte_carlo.paths

    @property
    def tolerances(self):
        return self.config.tolerances

    @property
    def checks(self):
        return self.config.checks

    def noise(self) -> NoiseBundle:
        if self._noise is None:
            self._noise = sample_noise(self.grid, self.spec.mark_space, self.paths, self.seed,
                                       self.workers)
        return self._noise

    def policy(self) -> ControlPolicy:
        return self.config.build_policy(self.spec, self.grid.N, self.base_dir)


def build_context(config: ExperimentConfig, command: str, config_path: Path,
                  workers: Optional[int] = None) -> RunContext:
    base_dir = config_path.parent
    spec = config.build_problem(base_dir)
    writer = ArtifactWriter(Path(config.outputs.directory), command, config.config_hash(),
                            config.monte_carlo.seed, config.outputs.formats)
    return RunContext(config=config, spec=spec, grid=config.build_grid(spec),
                      basis=config.basis.to_spec(), picard=config.picard.to_settings(),
                      writer=writer, base_dir=base_dir, workers=workers)


@dataclass
class SummaryRow:
    name: str
    value: str
    passed: Optional[bool] = None


@dataclass
class CommandOutcome:
    command: str
    passed: bool
    rows: List[SummaryRow] = field(default_factory=list)
    headline: Optional[str] = None  # printed on stdout

    def add(self, name: str, value: Any, passed: Optional[bool] = None) -> None:
        text = f"{value:.6g}" if isinstance(value, float) else str(value)
        self.rows.append(SummaryRow(name, text, passed))


def _record_check(check: str, passed: bool, details: Dict[str, Any]) -> bool:
    get_metrics().record_check(check, passed)
    log_check_result(logger, check, passed, details)
    return passed


# =============================================================================
# SIMULATE
# =============================================================================

def martingale_passes(fwd: ForwardPath, sigmas: float) -> bool:
    summary = martingale_summary(fwd)
    return bool(np.all(np.abs(summary["mean"] - 1.0) <= sigmas * summary["stderr"]))


def export_martingale(writer: ArtifactWriter, fwd: ForwardPath) -> None:
    summary = martingale_summary(fwd)

    def exporter(destination, header):
        rows = zip(range(fwd.grid.N + 1), summary["t"], summary["mean"], summary["stderr"],
                   summary["z"])
        return write_csv(destination, ("step", "t", "rho_mean", "rho_stderr", "z"), rows, header)

    writer.export("martingale.csv", exporter)


def simulate(ctx: RunContext) -> CommandOutcome:
    """Forward paths, rho-martingale summary and the state/cost BSDE diagnostics."""
    spec, grid, writer = ctx.spec, ctx.grid, ctx.writer
    policy = ctx.policy()
    noise = ctx.noise()
    ev = run_policy(spec, policy, noise, grid, ctx.basis, with_adjoint=False, workers=ctx.workers)
    fwd = ev.fwd
    cost = solve_cost_bsde(spec, fwd, noise, grid, ctx.basis, ev.include_average, state=ev.state)

    writer.export("paths.csv", lambda dest, header: export_paths_csv(
        fwd, dest, ctx.checks.export_paths, header))
    export_martingale(writer, fwd)
    writer.export("state_bsde.csv",
                  lambda dest, header: export_bsde_summary(ev.state, grid, dest, header))

    passed = _record_check("martingale", martingale_passes(fwd, ctx.tolerances.martingale_sigmas),
                           {"paths": noise.path_count})
    estimate = cost_of(spec, ev)
    gap, gap_stderr = bayes_identity_gap(spec, fwd, ev.state, cost, grid)
    moments = moment_stability(spec, policy, min(ctx.checks.moment_paths, ctx.paths), ctx.seed,
                               grid.N)
    record = {
        "cost": estimate.value,
        "cost_stderr": estimate.stderr,
        "y0": ev.state.y0.tolist(),
        "reconstruction_error": martingale_reconstruction_error(spec, ev.state, fwd, noise, grid),
        "bayes_gap": gap,
        "bayes_gap_stderr": gap_stderr,
        "moment_coarse": moments["coarse"],
        "moment_fine": moments["fine"],
        "moment_ratio": moments["ratio"],
        "martingale_passed": passed,
    }
    writer.json("simulate", record)

    outcome = CommandOutcome("simulate", passed)
    outcome.add("rho martingale", f"{noise.path_count} paths", passed)
    outcome.add("J", estimate.value)
    outcome.add("J stderr", estimate.stderr)
    outcome.add("y0", ", ".join(f"{v:.6g}" for v in ev.state.y0))
    outcome.add("Bayes identity gap", gap)
    outcome.add("4th-moment ratio (2N / N)", moments["ratio"])
    return outcome


# =============================================================================
# GRAD-CHECK
# =============================================================================

def random_directions(policy: ControlPolicy, count: int, scale: float,
                      rng: np.random.Generator) -> List[ControlPolicy]:
    return [policy.with_theta(policy.theta + scale * rng.standard_normal(policy.theta.shape))
            for _ in range(count)]


def gradient_rows(ctx: RunContext, base: ControlPolicy, noise: NoiseBundle,
                  directions: List[ControlPolicy],
                  evaluation: Optional[PolicyEvaluation] = None) -> List[Dict[str, Any]]:
    """Adjoint directional derivative against the CRN central difference, per direction."""
    spec, grid, tol = ctx.spec, ctx.grid, ctx.tolerances
    ev = evaluation or run_policy(spec, base, noise, grid, ctx.basis, ctx.picard,
                                  workers=ctx.workers)
    Hu = control_gradient(spec, ev)
    rows = []
    for index, target in enumerate(directions):
        adjoint = directional_derivative_from_delta(Hu, ev.fwd.rho,
                                                    control_difference(target, ev.fwd), grid.dt)
        fd = finite_difference_derivative(spec, base, target, noise, grid, ctx.basis,
                                          ctx.checks.gradient_eps)
        gap = abs(adjoint.value - fd.value)
        combined = float(np.hypot(adjoint.stderr, fd.stderr))
        scale = max(abs(adjoint.value), abs(fd.value))
        rel_error = gap / scale if scale > 0 else 0.0
        passed = gap <= max(tol.gradient_rel * abs(fd.value), tol.gradient_sigmas * combined)
        rows.append({
            "direction": index,
            "adjoint": adjoint.value,
            "adjoint_stderr": adjoint.stderr,
            "finite_difference": fd.value,
            "finite_difference_stderr": fd.stderr,
            "rel_error": rel_error,
            "passed": passed,
        })
    return rows


def grad_check(ctx: RunContext) -> CommandOutcome:
    """Hamiltonian gradients, then the variational formula along random directions."""
    spec, checks, tol = ctx.spec, ctx.checks, ctx.tolerances
    points = sample_points(spec, checks.hamiltonian_points, ctx.seed)
    hamiltonian = finite_diff_check(spec, points, tol.hamiltonian_fd, checks.fd_step)
    _record_check("hamiltonian_gradient", hamiltonian.passed, hamiltonian.to_dict())

    base = ctx.policy()
    rng = np.random.default_rng(ctx.seed)
    # direction 0 is the zero direction: both estimates are exactly 0
    directions = [base] + random_directions(base, checks.gradient_directions,
                                            checks.direction_scale, rng)
    rows = gradient_rows(ctx, base, ctx.noise(), directions)
    gradient_passed = _record_check("variational_formula", all(r["passed"] for r in rows),
                                    {"directions": len(rows)})
    ctx.writer.table("grad_check", rows)
    ctx.writer.json("hamiltonian_check", hamiltonian.to_dict())

    outcome = CommandOutcome("grad-check", hamiltonian.passed and gradient_passed)
    outcome.add("H gradient max rel. error", hamiltonian.max_rel_error, hamiltonian.passed)
    for row in rows:
        outcome.add(f"direction {row['direction']}",
                    f"adjoint {row['adjoint']:.6g}  fd {row['finite_difference']:.6g}  "
                    f"rel {row['rel_error']:.2e}", row["passed"])
    return outcome


# =============================================================================
# OPTIMIZE / VERIFY-MP
# =============================================================================

def _report_rows(outcome: CommandOutcome, record: Dict[str, Any], tol: float) -> None:
    outcome.add("J", record["cost"])
    outcome.add("J stderr", record["cost_stderr"])
    outcome.add("necessary residual", record["necessary_residual"],
                record["necessary_residual"] <= tol)
    if "conditional_residual" in record:
        outcome.add("conditional residual", record["conditional_residual"])
    if "directional_derivative" in record:
        outcome.add("derivative along step", record["directional_derivative"])
    if "sufficient_passed" in record:
        outcome.add("sufficient certificate",
                    record["sufficient_convexity_failures"]
                    or f"min. residual {record['sufficient_minimization_residual']:.3g}",
                    record["sufficient_passed"])


def optimize(ctx: RunContext) -> CommandOutcome:
    config = ctx.config
    result = optimizer.run(ctx.spec, ctx.policy(), config.optimizer, ctx.grid, ctx.basis,
                           ctx.paths, ctx.seed, ctx.picard,
                           sufficient_tol=ctx.tolerances.sufficient_residual,
                           workers=ctx.workers,
                           convexity_samples=ctx.checks.convexity_samples,
                           minimization_grid=ctx.checks.minimization_grid)
    ctx.writer.export("trace.csv", lambda dest, header: result.trace.export_csv(dest, header))
    record = result.report.to_record()
    record.update({"converged": result.converged, "iterations": len(result.trace.records)})
    ctx.writer.json("optimality_report", record)
    ctx.writer.json("policy", {"policy": result.policy.to_dict()}, force=True)

    outcome = CommandOutcome("optimize", result.converged)
    outcome.add("iterations", len(result.trace.records))
    outcome.add("converged", result.converged, result.converged)
    _report_rows(outcome, record, config.optimizer.tol)
    return outcome


def verify_mp(ctx: RunContext) -> CommandOutcome:
    """OptimalityReport of the configured policy; passes when every condition holds."""
    tol = ctx.tolerances
    report = optimality_report(ctx.spec, ctx.policy(), ctx.noise(), ctx.grid, ctx.basis,
                               ctx.picard, sufficient_tol=tol.sufficient_residual,
                               convexity_samples=ctx.checks.convexity_samples,
                               minimization_grid=ctx.checks.minimization_grid)
    record = report.to_record()
    ctx.writer.json("optimality_report", record)
    certificate = report.sufficient_certificate
    passed = (report.necessary_residual <= tol.necessary_residual
              and (certificate is None or certificate.passed))
    _record_check("verify_mp", passed, {"necessary_residual": report.necessary_residual})

    outcome = CommandOutcome("verify-mp", passed,
                             headline=f"necessary_residual={report.necessary_residual:.6e}")
    _report_rows(outcome, record, tol.necessary_residual)
    return outcome
