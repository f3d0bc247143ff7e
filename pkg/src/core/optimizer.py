"""
pomp-core - Policy Optimizer
============================

Projected gradient descent over the coefficients of an observation-feedback
policy. Each iteration evaluates the policy (forward pass, BSDEs, adjoint),
projects H_u onto the Y-features, moves theta against the resulting
parameter direction and, with backtracking enabled, only accepts steps that
do not increase the sample-average cost on the iteration's noise.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, List, Literal, Mapping, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.core.bsde import PicardSettings
from src.core.export import write_csv
from src.core.forward import ControlPolicy
from src.core.gradient import (
    PolicyEvaluation,
    compute_gradient_field,
    cost_of,
    estimate_cost,
    necessary_residual_from_field,
    optimality_report,
    run_policy,
)
from src.core.noise import NoiseBundle, TimeGrid, sample_noise
from src.core.regression import BasisSpec
from src.data.problem_model import ProblemSpec
from src.observability.logging import log_optimizer_iteration
from src.observability.metrics import get_metrics
from src.observability.tracing import add_span_attributes, trace_operation
from src.schemas.reports import OptimalityReport

logger = logging.getLogger("pomp.optimizer")


class OptimizerConfig(BaseModel):
    """Descent settings; `paths` None means the experiment's Monte-Carlo path count."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    step_size: float = Field(0.5, gt=0.0)
    max_iters: int = Field(200, ge=0)
    tol: float = Field(1e-3, gt=0.0)
    paths: Optional[int] = Field(None, ge=2)
    seed_policy: Literal["fixed", "fresh"] = "fixed"
    armijo: Optional[float] = Field(0.5, gt=0.0, lt=1.0,
                                    description="Backtracking factor; None disables it")
    max_backtracks: int = Field(10, ge=0)


@dataclass
class IterationRecord:
    iteration: int
    cost: float
    stderr: float
    residual: float
    alpha: float
    accepted: bool
    backtracks: int = 0


@dataclass
class OptimizerTrace:
    records: List[IterationRecord] = field(default_factory=list)

    COLUMNS = ("iter", "J", "stderr", "residual", "alpha", "accepted", "backtracks")

    def append(self, record: IterationRecord) -> None:
        self.records.append(record)

    @property
    def costs(self) -> List[float]:
        return [r.cost for r in self.records]

    @property
    def final(self) -> IterationRecord:
        return self.records[-1]

    def rows(self):
        for r in self.records:
            yield [r.iteration, r.cost, r.stderr, r.residual, r.alpha, r.accepted, r.backtracks]

    def export_csv(self, destination: Union[str, Path],
                   header: Optional[Mapping[str, Any]] = None) -> Path:
        return write_csv(destination, self.COLUMNS, self.rows(), header)


@dataclass
class OptimizerResult:
    policy: ControlPolicy
    trace: OptimizerTrace
    report: OptimalityReport
    converged: bool


# =============================================================================
# STEP
# =============================================================================

@trace_operation("optimizer_step")
def step(spec: ProblemSpec, policy: ControlPolicy, config: OptimizerConfig, noise: NoiseBundle,
         grid: TimeGrid, basis: BasisSpec, picard: Optional[PicardSettings] = None,
         iteration: int = 0,
         evaluation: Optional[PolicyEvaluation] = None) -> Tuple[ControlPolicy, IterationRecord]:
    """
    One projected-gradient step theta <- theta - alpha c. Returns the new
    policy and the record of the policy the step started from.
    """
    ev = evaluation or run_policy(spec, policy, noise, grid, basis, picard)
    current = cost_of(spec, ev)
    gf = compute_gradient_field(spec, policy, noise, grid, basis, picard, evaluation=ev)
    residual = necessary_residual_from_field(ev.fwd.u, gf.class_field, spec.control_set)

    if not np.any(gf.direction):
        record = IterationRecord(iteration, current.value, current.stderr, residual, 0.0, True)
        return policy, record

    alpha = config.step_size
    candidate = policy.with_theta(policy.theta - alpha * gf.direction)
    backtracks = 0
    accepted = True
    if config.armijo is not None:
        while True:
            trial = estimate_cost(spec, candidate, noise, grid, basis)
            if trial.value <= current.value:
                break
            if backtracks >= config.max_backtracks:
                accepted = False
                break
            backtracks += 1
            alpha *= config.armijo
            candidate = policy.with_theta(policy.theta - alpha * gf.direction)

    record = IterationRecord(iteration, current.value, current.stderr, residual, alpha,
                             accepted, backtracks)
    add_span_attributes({"optimizer.iteration": iteration, "optimizer.alpha": alpha,
                         "optimizer.backtracks": backtracks, "optimizer.residual": residual,
                         "optimizer.accepted": accepted})
    return (candidate if accepted else policy), record


# =============================================================================
# RUN
# =============================================================================

def _noise_for(spec: ProblemSpec, grid: TimeGrid, config: OptimizerConfig, paths: int,
               seed: int, iteration: int, workers: Optional[int]) -> NoiseBundle:
    offset = iteration if config.seed_policy == "fresh" else 0
    return sample_noise(grid, spec.mark_space, paths, seed + offset, workers)


@trace_operation("optimizer_run")
def run(spec: ProblemSpec, initial: ControlPolicy, config: OptimizerConfig, grid: TimeGrid,
        basis: BasisSpec, paths: int, seed: int, picard: Optional[PicardSettings] = None,
        sufficient_tol: float = 1e-3, workers: Optional[int] = None,
        convexity_samples: int = 100, minimization_grid: int = 21) -> OptimizerResult:
    """
    Iterate until the necessary residual drops to config.tol or max_iters
    steps were taken. Hitting max_iters is reported through `converged`.
    """
    paths = config.paths or paths
    trace = OptimizerTrace()
    policy = initial
    converged = False
    noise: Optional[NoiseBundle] = None
    ev = None

    for iteration in range(config.max_iters + 1):
        if noise is None or config.seed_policy == "fresh":
            noise = _noise_for(spec, grid, config, paths, seed, iteration, workers)
        ev = run_policy(spec, policy, noise, grid, basis, picard, workers=workers)
        if iteration == config.max_iters:
            cost = cost_of(spec, ev)
            gf = compute_gradient_field(spec, policy, noise, grid, basis, picard, evaluation=ev)
            residual = necessary_residual_from_field(ev.fwd.u, gf.class_field, spec.control_set)
            record = IterationRecord(iteration, cost.value, cost.stderr, residual, 0.0, True)
            converged = residual <= config.tol
            new_policy = policy
        else:
            new_policy, record = step(spec, policy, config, noise, grid, basis, picard,
                                      iteration, evaluation=ev)
            converged = record.residual <= config.tol
            if converged:
                record.alpha, record.accepted, record.backtracks = 0.0, True, 0
                new_policy = policy

        trace.append(record)
        get_metrics().record_iteration(record.accepted, record.cost, record.residual)
        log_optimizer_iteration(logger, record.iteration, record.cost, record.residual,
                                record.alpha, record.accepted)
        if converged or iteration == config.max_iters:
            break
        if not record.accepted and config.seed_policy == "fixed":
            # same noise, same policy: every further iteration would repeat this one
            logger.warning("Backtracking exhausted; stopping",
                           extra={"event_type": "optimizer_stalled", "iteration": iteration})
            break
        policy = new_policy

    report = optimality_report(spec, policy, noise, grid, basis, picard,
                               sufficient_tol=sufficient_tol,
                               convexity_samples=convexity_samples,
                               minimization_grid=minimization_grid, evaluation=ev)
    logger.info(
        "Optimizer finished",
        extra={"event_type": "optimizer_done", "iterations": len(trace.records),
               "converged": converged, "cost": report.cost.value,
               "residual": report.necessary_residual},
    )
    return OptimizerResult(policy=policy, trace=trace, report=report, converged=converged)


# =============================================================================
# GRID-SEARCH ORACLE
# =============================================================================

@dataclass
class GridSearchResult:
    bias: float
    gain: float
    cost: float
    stderr: float
    evaluations: int


def grid_search_affine(spec: ProblemSpec, noise: NoiseBundle, grid: TimeGrid, basis: BasisSpec,
                       bias_range: Tuple[float, float] = (-2.0, 2.0),
                       gain_range: Tuple[float, float] = (-2.0, 2.0),
                       points: int = 9, zoom_rounds: int = 1) -> GridSearchResult:
    """
    Brute-force minimum of J over single-block policies u = bias + gain Y:
    a coarse grid, then `zoom_rounds` refinements one cell around the best.
    """
    if spec.K != 1:
        raise ValueError("grid search covers scalar controls only")
    if points < 2:
        raise ValueError(f"grid search needs at least 2 points per axis, got {points}")
    best: Optional[GridSearchResult] = None
    evaluations = 0
    lo_b, hi_b = bias_range
    lo_g, hi_g = gain_range
    for _ in range(zoom_rounds + 1):
        biases = np.linspace(lo_b, hi_b, points)
        gains = np.linspace(lo_g, hi_g, points)
        for bias in biases:
            for gain in gains:
                policy = ControlPolicy.affine(spec.control_set, grid.N, bias, gain, blocks=1)
                est = estimate_cost(spec, policy, noise, grid, basis)
                evaluations += 1
                if best is None or est.value < best.cost:
                    best = GridSearchResult(float(bias), float(gain), est.value, est.stderr, 0)
        db = (hi_b - lo_b) / (points - 1)
        dg = (hi_g - lo_g) / (points - 1)
        lo_b, hi_b = best.bias - db, best.bias + db
        lo_g, hi_g = best.gain - dg, best.gain + dg
    best.evaluations = evaluations
    return best
