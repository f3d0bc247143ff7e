"""
pomp-core - Control Gradient
============================

Everything built from one policy evaluation (forward pass, state and cost
BSDEs, adjoint):

- estimate_cost: J = E[rho_N Phi(x_N) + sum_n rho_n l_n dt] + gamma(y_0)
- directional_derivative: E[sum_n rho_n <H_u, u_dir - u_base> dt]
- conditional_projection: E[rho H_u | Y-features] / E[rho | Y-features]
- necessary_residual: projected-gradient stationarity on the box U
- difference_formula_check, perturbation_order_check, sufficient_check
"""

import itertools
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Sequence

import numpy as np
import scipy.linalg

from src.core.bsde import (
    AdjointSolution,
    BsdeSolution,
    CostBsdeSolution,
    PicardSettings,
    adjoint_point,
    cost_samples,
    policy_includes_average,
    running_cost,
    solve_adjoint,
    solve_cost_bsde,
    solve_state_bsde,
)
from src.core.forward import ControlLaw, ControlPolicy, ForwardPath, PerturbedPolicy, simulate_forward
from src.core.hamiltonian import DIRECTIONS, HamiltonianPoint, eval_H, grad_H
from src.core.noise import NoiseBundle, TimeGrid
from src.core.regression import BasisSpec, regress
from src.data.exceptions import ChangeOfMeasureError, StructuralConditionError
from src.data.problem_model import ControlSet, ProblemSpec
from src.observability.logging import log_check_result
from src.observability.metrics import get_metrics
from src.observability.tracing import trace_operation
from src.schemas.reports import (
    DifferenceFormulaReport,
    Estimate,
    OptimalityReport,
    PerturbationOrderReport,
    SufficientCertificate,
)

logger = logging.getLogger("pomp.gradient")

RHO_FLOOR = 1e-8
FLOOR_FRACTION_LIMIT = 0.01
PROJECTION_BASIS = BasisSpec(degree=2)

ResidualField = Literal["class", "conditional"]
RESIDUAL_FIELDS = ("class", "conditional")


def _estimate(samples: np.ndarray, shift: float = 0.0) -> Estimate:
    stderr = float(samples.std(ddof=1) / np.sqrt(samples.size)) if samples.size > 1 else 0.0
    return Estimate(value=float(samples.mean()) + shift, stderr=stderr)


# =============================================================================
# POLICY EVALUATION
# =============================================================================

@dataclass(frozen=True, eq=False)
class PolicyEvaluation:
    """Forward pass and backward solutions of one policy on one noise sample."""
    fwd: ForwardPath
    state: BsdeSolution
    cost: Optional[CostBsdeSolution]
    adjoint: Optional[AdjointSolution]
    noise: NoiseBundle
    grid: TimeGrid
    include_average: bool


def run_policy(spec: ProblemSpec, policy: ControlLaw, noise: NoiseBundle, grid: TimeGrid,
               basis: BasisSpec, picard: Optional[PicardSettings] = None,
               with_adjoint: bool = True, workers: Optional[int] = None) -> PolicyEvaluation:
    include_average = policy_includes_average(policy)
    fwd = simulate_forward(spec, policy, noise, grid, workers)
    state = solve_state_bsde(spec, fwd, noise, grid, basis, include_average)
    cost = adjoint = None
    if with_adjoint:
        cost = solve_cost_bsde(spec, fwd, noise, grid, basis, include_average, state=state)
        adjoint = solve_adjoint(spec, fwd, noise, grid, state, cost, basis, picard,
                                include_average)
    return PolicyEvaluation(fwd=fwd, state=state, cost=cost, adjoint=adjoint, noise=noise,
                            grid=grid, include_average=include_average)


def _require_adjoint(ev: PolicyEvaluation) -> AdjointSolution:
    if ev.adjoint is None:
        raise ValueError("policy evaluation was run without the adjoint")
    return ev.adjoint


# =============================================================================
# COST & DIRECTIONAL DERIVATIVE
# =============================================================================

def cost_of(spec: ProblemSpec, ev: PolicyEvaluation) -> Estimate:
    y0 = ev.state.y[:1, 0]
    gamma = float(spec.coefficients.gamma(y0)[0])
    return _estimate(cost_samples(spec, ev.fwd, ev.state, ev.grid), gamma)


@trace_operation("estimate_cost")
def estimate_cost(spec: ProblemSpec, policy: ControlLaw, noise: NoiseBundle, grid: TimeGrid,
                  basis: BasisSpec, evaluation: Optional[PolicyEvaluation] = None) -> Estimate:
    """J with the standard error of its path-dependent part; gamma(y_0) is deterministic."""
    ev = evaluation or run_policy(spec, policy, noise, grid, basis, with_adjoint=False)
    return cost_of(spec, ev)


def control_gradient(spec: ProblemSpec, ev: PolicyEvaluation) -> np.ndarray:
    """H_u along the trajectory, shape (P, N, K)."""
    adjoint = _require_adjoint(ev)
    P, N = ev.fwd.path_count, ev.grid.N
    Hu = np.empty((P, N, spec.K))
    for n in range(N):
        pt = adjoint_point(spec, ev.fwd, ev.state, adjoint, ev.grid, n)
        Hu[:, n] = grad_H(spec, pt, "u")
    return Hu


def control_difference(policy: ControlLaw, fwd: ForwardPath) -> np.ndarray:
    """u_policy - u_fwd on the Y-paths of `fwd`, shape (P, N, K)."""
    N = fwd.u.shape[1]
    delta = np.empty_like(fwd.u)
    for n in range(N):
        delta[:, n] = policy.controls(n, fwd.Y[:, n], fwd.Y_avg[:, n]) - fwd.u[:, n]
    return delta


def directional_derivative_from_delta(Hu: np.ndarray, rho: np.ndarray, delta: np.ndarray,
                                      dt: float) -> Estimate:
    """E[sum_n rho_n <H_u,n, delta_n> dt]; linear in delta."""
    samples = np.einsum("pn,pnk,pnk->p", rho[:, : Hu.shape[1]], Hu, delta) * dt
    return _estimate(samples)


@trace_operation("directional_derivative")
def directional_derivative(spec: ProblemSpec, policy_base: ControlLaw, policy_dir: ControlLaw,
                           noise: NoiseBundle, grid: TimeGrid, basis: BasisSpec,
                           picard: Optional[PicardSettings] = None,
                           evaluation: Optional[PolicyEvaluation] = None) -> Estimate:
    """Derivative of J along u_bar + eps (u_dir - u_bar) at eps = 0, on shared noise."""
    ev = evaluation or run_policy(spec, policy_base, noise, grid, basis, picard)
    delta = control_difference(policy_dir, ev.fwd)
    return directional_derivative_from_delta(control_gradient(spec, ev), ev.fwd.rho, delta,
                                             grid.dt)


def finite_difference_derivative(spec: ProblemSpec, policy_base: ControlLaw,
                                 policy_dir: ControlLaw, noise: NoiseBundle, grid: TimeGrid,
                                 basis: BasisSpec, eps: float = 1e-3) -> Estimate:
    """[J(u_bar + eps d) - J(u_bar - eps d)] / 2 eps with common random numbers."""
    values = []
    samples = []
    for sign in (1.0, -1.0):
        ev = run_policy(spec, PerturbedPolicy(policy_base, policy_dir, sign * eps), noise, grid,
                        basis, with_adjoint=False)
        values.append(cost_of(spec, ev).value)
        samples.append(cost_samples(spec, ev.fwd, ev.state, grid))
    diff = (samples[0] - samples[1]) / (2.0 * eps)
    stderr = float(diff.std(ddof=1) / np.sqrt(diff.size)) if diff.size > 1 else 0.0
    return Estimate(value=(values[0] - values[1]) / (2.0 * eps), stderr=stderr)


# =============================================================================
# CONDITIONAL PROJECTION
# =============================================================================

@dataclass(frozen=True, eq=False)
class Projection:
    values: np.ndarray                 # (P, N, D)
    numerator: List[np.ndarray]        # per-step coefficients of E[rho g | features]
    denominator: List[np.ndarray]      # per-step coefficients of E[rho | features]
    floored_fraction: float


def observation_features(fwd: ForwardPath, include_average: bool) -> np.ndarray:
    """(P, N, F) Y-features at the left point of every step."""
    N = fwd.u.shape[1]
    columns = [fwd.Y[:, :N]]
    if include_average:
        columns.append(fwd.Y_avg[:, :N])
    return np.stack(columns, axis=-1)


def conditional_projection(grad: np.ndarray, rho: np.ndarray, features: np.ndarray,
                           basis: BasisSpec = PROJECTION_BASIS,
                           floor: float = RHO_FLOOR) -> Projection:
    """
    Per-step ratio of the regressions of rho*grad and rho on the features.

    grad (P, N, D), rho (P, N), features (P, N, F). Denominators below
    `floor` are raised to it; more than 1% of such points is an error.
    """
    P, N, D = grad.shape
    values = np.empty_like(grad, dtype=float)
    numerator: List[np.ndarray] = []
    denominator: List[np.ndarray] = []
    floored = 0
    for n in range(N):
        weights = rho[:, n]
        targets = np.concatenate([weights[:, None] * grad[:, n], weights[:, None]], axis=1)
        fit = regress(features[:, n], targets, basis)
        num, den = fit.fitted[:, :D], fit.fitted[:, D]
        low = den < floor
        floored += int(low.sum())
        values[:, n] = num / np.where(low, floor, den)[:, None]
        numerator.append(fit.coefficients[:, :D])
        denominator.append(fit.coefficients[:, D])
        get_metrics().record_regressions("projection")

    fraction = floored / float(P * N) if P * N else 0.0
    if fraction > FLOOR_FRACTION_LIMIT:
        raise ChangeOfMeasureError(
            f"density regression fell below {floor:g} at {fraction:.1%} of evaluation points"
        )
    return Projection(values=values, numerator=numerator, denominator=denominator,
                      floored_fraction=fraction)


# =============================================================================
# GRADIENT FIELD
# =============================================================================

@dataclass(frozen=True, eq=False)
class GradientField:
    """
    Hu: raw H_u stream (P, N, K); projected: its conditional projection;
    direction: parameter-space step c (B, K, F); class_field: c_b(n) . phi_n.
    """
    Hu: np.ndarray
    projected: np.ndarray
    weights: np.ndarray
    direction: np.ndarray
    class_field: np.ndarray
    projection: Projection = field(repr=False)


def parameter_direction(policy: ControlPolicy, fwd: ForwardPath, Hu: np.ndarray) -> np.ndarray:
    """
    Per block c_b = pinv(sum A_n) sum g_n with g_n = E[rho H_u phi'] and
    A_n = E[rho phi phi']. Since phi is Y-measurable, g_n equals E[rho G phi']
    for the projected field G without dividing by the fitted density.
    """
    K, F = policy.control_dim, policy.feature_count
    direction = np.zeros((policy.blocks, K, F))
    for b in range(policy.blocks):
        g = np.zeros((K, F))
        A = np.zeros((F, F))
        for n in policy.block_steps(b):
            phi = policy.features(fwd.Y[:, n], fwd.Y_avg[:, n])
            rho = fwd.rho[:, n]
            g += np.einsum("p,pk,pf->kf", rho, Hu[:, n], phi) / fwd.path_count
            A += np.einsum("p,pf,pg->fg", rho, phi, phi) / fwd.path_count
        direction[b] = g @ scipy.linalg.pinvh(A)
    return direction


def class_field(policy: ControlPolicy, fwd: ForwardPath, direction: np.ndarray) -> np.ndarray:
    P, N = fwd.path_count, policy.steps
    values = np.empty((P, N, policy.control_dim))
    for n in range(N):
        phi = policy.features(fwd.Y[:, n], fwd.Y_avg[:, n])
        values[:, n] = np.einsum("kf,pf->pk", direction[policy.block_of(n)], phi)
    return values


@trace_operation("gradient_field")
def compute_gradient_field(spec: ProblemSpec, policy: ControlPolicy, noise: NoiseBundle,
                           grid: TimeGrid, basis: BasisSpec,
                           picard: Optional[PicardSettings] = None,
                           projection_basis: BasisSpec = PROJECTION_BASIS,
                           floor: float = RHO_FLOOR,
                           evaluation: Optional[PolicyEvaluation] = None) -> GradientField:
    ev = evaluation or run_policy(spec, policy, noise, grid, basis, picard)
    Hu = control_gradient(spec, ev)
    rho = ev.fwd.rho[:, : grid.N]
    projection = conditional_projection(
        Hu, rho, observation_features(ev.fwd, policy.use_running_average),
        projection_basis, floor)
    direction = parameter_direction(policy, ev.fwd, Hu)
    return GradientField(Hu=Hu, projected=projection.values, weights=rho, direction=direction,
                         class_field=class_field(policy, ev.fwd, direction),
                         projection=projection)


def necessary_residual_from_field(u: np.ndarray, gradient: np.ndarray,
                                  control_set: ControlSet) -> float:
    """max over steps and paths of |u - Proj_U(u - G)|."""
    if u.size == 0:
        return 0.0
    step = u - control_set.project(u - gradient)
    return float(np.max(np.linalg.norm(step, axis=-1)))


def necessary_residual(spec: ProblemSpec, policy: ControlPolicy, noise: NoiseBundle,
                       grid: TimeGrid, basis: BasisSpec,
                       picard: Optional[PicardSettings] = None,
                       projection_basis: BasisSpec = PROJECTION_BASIS,
                       evaluation: Optional[PolicyEvaluation] = None,
                       against: ResidualField = "class") -> float:
    """
    Stationarity residual of the policy.

    against="class" measures the gradient restricted to the policy class
    (zero at a stationary point of the optimizer). against="conditional" uses
    E[rho H_u | Y] / E[rho | Y] directly and can stay positive when the
    class cannot represent the conditional gradient.
    """
    if against not in RESIDUAL_FIELDS:
        raise ValueError(f"against must be one of {RESIDUAL_FIELDS}, got {against!r}")
    ev = evaluation or run_policy(spec, policy, noise, grid, basis, picard)
    gf = compute_gradient_field(spec, policy, noise, grid, basis, picard, projection_basis,
                                evaluation=ev)
    gradient = gf.class_field if against == "class" else gf.projected
    return necessary_residual_from_field(ev.fwd.u, gradient, spec.control_set)


# =============================================================================
# DIFFERENCE FORMULA
# =============================================================================

@trace_operation("difference_formula_check")
def difference_formula_check(spec: ProblemSpec, policy_u: ControlLaw, policy_ubar: ControlLaw,
                             noise: NoiseBundle, grid: TimeGrid, basis: BasisSpec,
                             picard: Optional[PicardSettings] = None) -> DifferenceFormulaReport:
    """
    J(u) - J(u_bar) estimated directly and through its expansion around u_bar:
    Hamiltonian gap less its linearisation, the sigma2/z2 correction of the
    observation-drift change, terminal and initial remainders, and the
    cross terms carried by rho^u - rho_bar.
    """
    c = spec.coefficients
    bar = run_policy(spec, policy_ubar, noise, grid, basis, picard)
    pert = run_policy(spec, policy_u, noise, grid, basis, with_adjoint=False)
    adjoint = _require_adjoint(bar)
    cost = bar.cost
    fb, fu = bar.fwd, pert.fwd
    sb, su = bar.state, pert.state
    dt, N = grid.dt, grid.N
    P = fb.path_count

    terms: Dict[str, np.ndarray] = {
        name: np.zeros(P) for name in
        ("hamiltonian", "h_difference", "terminal", "coupling", "cross_R2", "cross_l",
         "cross_terminal")
    }
    for n in range(N):
        pt_bar = adjoint_point(spec, fb, sb, adjoint, grid, n)
        pt_u = pt_bar.with_values(x=fu.x[:, n], y=su.y[:, n], z1=su.z1[:, n], z2=su.z2[:, n],
                                  Lambda=su.Lambda[:, n], u=fu.u[:, n])
        gap = eval_H(spec, pt_u) - eval_H(spec, pt_bar)
        for wrt in DIRECTIONS[:-1]:
            delta = getattr(pt_u, wrt) - getattr(pt_bar, wrt)
            gap = gap - np.sum((grad_H(spec, pt_bar, wrt) * delta).reshape(P, -1), axis=1)

        t = grid.t(n)
        dh = fu.h[:, n] - fb.h[:, n]
        ds2 = c.sigma2(t, fu.x[:, n], fu.u[:, n]) - c.sigma2(t, fb.x[:, n], fb.u[:, n])
        correction = (np.einsum("pa,pa->p", ds2, pt_bar.p)
                      + np.einsum("pa,pa->p", su.z2[:, n] - sb.z2[:, n], pt_bar.k)) * dh
        rho_bar = fb.rho[:, n]
        drho = fu.rho[:, n] - rho_bar
        terms["hamiltonian"] += rho_bar * gap * dt
        terms["h_difference"] -= rho_bar * correction * dt
        terms["cross_R2"] += cost.R2[:, n] * drho * dh * dt
        terms["cross_l"] += drho * (running_cost(spec, fu, su, grid, n)
                                    - running_cost(spec, fb, sb, grid, n)) * dt

    xb, xu = fb.x[:, N], fu.x[:, N]
    dx = xu - xb
    rho_bar_N = fb.rho[:, N]
    Phi_gap = c.Phi(xu) - c.Phi(xb)
    terms["terminal"] = rho_bar_N * (Phi_gap - np.einsum("pa,pa->p", c.Phi_x(xb), dx))
    phi_rem = c.phi(xu) - c.phi(xb) - np.einsum("pac,pc->pa", c.phi_x(xb), dx)
    terms["coupling"] = -rho_bar_N * np.einsum("pa,pa->p", adjoint.k[:, N], phi_rem)
    terms["cross_terminal"] = (fu.rho[:, N] - rho_bar_N) * Phi_gap

    yb0, yu0 = sb.y[:1, 0], su.y[:1, 0]
    gamma_gap = float(c.gamma(yu0)[0] - c.gamma(yb0)[0])
    initial = gamma_gap - float(np.dot(c.gamma_y(yb0)[0], (yu0 - yb0)[0]))

    lhs_samples = cost_samples(spec, fu, su, grid) - cost_samples(spec, fb, sb, grid)
    rhs_samples = sum(terms.values())
    lhs = float(lhs_samples.mean()) + gamma_gap
    rhs = float(rhs_samples.mean()) + initial
    diff = lhs_samples - rhs_samples
    stderr = float(diff.std(ddof=1) / np.sqrt(P)) if P > 1 else 0.0
    means = {name: float(v.mean()) for name, v in terms.items()}
    means["initial"] = initial
    return DifferenceFormulaReport(lhs=lhs, rhs=rhs, gap=lhs - rhs, stderr=stderr, terms=means)


# =============================================================================
# PERTURBATION ORDERS
# =============================================================================

def _slope(eps: np.ndarray, gaps: np.ndarray) -> Optional[float]:
    positive = gaps > 0
    if positive.sum() < 2:
        return None
    slope, _ = np.polyfit(np.log(eps[positive]), np.log(gaps[positive]), 1)
    return float(slope)


@trace_operation("perturbation_order_check")
def perturbation_order_check(spec: ProblemSpec, policy: ControlLaw, direction: ControlLaw,
                             noise: NoiseBundle, grid: TimeGrid, eps_list: Sequence[float],
                             basis: BasisSpec) -> PerturbationOrderReport:
    """
    E[sup_n |x^eps - x|^4], E[sup_n |y^eps - y|^4] and E[sup_n |rho^eps - rho|^2]
    for u^eps = u_bar + eps (u - u_bar), with their log-log slopes in eps.
    """
    eps = np.asarray(sorted({float(e) for e in eps_list}), dtype=float)
    if eps.size < 3 or np.any(eps <= 0):
        raise ValueError("eps_list needs at least three distinct positive values")
    base = run_policy(spec, policy, noise, grid, basis, with_adjoint=False)
    gaps: Dict[str, List[float]] = {"x": [], "y": [], "rho": []}
    for e in eps:
        ev = run_policy(spec, PerturbedPolicy(policy, direction, float(e)), noise, grid, basis,
                        with_adjoint=False)
        dx = np.linalg.norm(ev.fwd.x - base.fwd.x, axis=2).max(axis=1)
        dy = np.linalg.norm(ev.state.y - base.state.y, axis=2).max(axis=1)
        drho = np.abs(ev.fwd.rho - base.fwd.rho).max(axis=1)
        gaps["x"].append(float(np.mean(dx ** 4)))
        gaps["y"].append(float(np.mean(dy ** 4)))
        gaps["rho"].append(float(np.mean(drho ** 2)))
    slopes = {name: _slope(eps, np.asarray(values)) for name, values in gaps.items()}
    return PerturbationOrderReport(eps=eps.tolist(), gaps=gaps, slopes=slopes)


# =============================================================================
# SUFFICIENT CONDITION
# =============================================================================

def check_structural_case(spec: ProblemSpec, samples: int = 64, seed: int = 0,
                          atol: float = 1e-12) -> None:
    """
    Raise StructuralConditionError unless h depends on t only and phi is
    linear in x.
    """
    c = spec.coefficients
    rng = np.random.default_rng(seed)
    x = rng.uniform(-5.0, 5.0, size=(samples, spec.n))
    x2 = rng.uniform(-5.0, 5.0, size=(samples, spec.n))
    lower = np.maximum(np.asarray(spec.control_set.lower, dtype=float), -5.0)
    upper = np.minimum(np.asarray(spec.control_set.upper, dtype=float), 5.0)
    u = lower + (upper - lower) * rng.uniform(size=(samples, spec.K))
    t = float(rng.uniform(0.0, spec.T))

    if np.max(np.abs(c.h_x(t, x, u)), initial=0.0) > atol:
        raise StructuralConditionError("observation drift h must not depend on x",
                                       "h_x is nonzero at sampled points")
    if np.max(np.abs(c.h_u(t, x, u)), initial=0.0) > atol:
        raise StructuralConditionError("observation drift h must not depend on u",
                                       "h_u is nonzero at sampled points")
    h = c.h(t, x, u)
    if np.ptp(h) > atol * (1.0 + np.max(np.abs(h))):
        raise StructuralConditionError("observation drift h must be a function of t only",
                                       f"h varies by {np.ptp(h):.3e} at t={t:.3f}")

    zero = c.phi(np.zeros((1, spec.n)))
    combined = c.phi(x + 2.0 * x2)
    linear = c.phi(x) + 2.0 * c.phi(x2)
    scale = 1.0 + np.max(np.abs(linear), initial=0.0)
    if np.max(np.abs(zero), initial=0.0) > 1e-9 or np.max(np.abs(combined - linear),
                                                            initial=0.0) > 1e-9 * scale:
        raise StructuralConditionError("terminal coupling phi must be linear in x",
                                       "phi(a + 2b) != phi(a) + 2 phi(b) or phi(0) != 0")


def is_structural_case(spec: ProblemSpec) -> bool:
    try:
        check_structural_case(spec)
    except StructuralConditionError:
        return False
    return True


def _random_state(spec: ProblemSpec, rng: np.random.Generator, count: int, box: float) -> Dict:
    lower = np.maximum(np.asarray(spec.control_set.lower, dtype=float), -box)
    upper = np.minimum(np.asarray(spec.control_set.upper, dtype=float), box)
    n, m, K, M = spec.n, spec.m, spec.K, spec.M
    return {
        "x": rng.uniform(-box, box, size=(count, n)),
        "y": rng.uniform(-box, box, size=(count, m)),
        "z1": rng.uniform(-box, box, size=(count, m)),
        "z2": rng.uniform(-box, box, size=(count, m)),
        "Lambda": rng.uniform(-box, box, size=(count, m, M)),
        "u": lower + (upper - lower) * rng.uniform(size=(count, K)),
    }


def _midpoint_violation(f_a: np.ndarray, f_b: np.ndarray, f_mid: np.ndarray) -> np.ndarray:
    slack = 1e-9 * (1.0 + np.abs(f_a) + np.abs(f_b))
    return f_mid > 0.5 * (f_a + f_b) + slack


def convexity_failures(spec: ProblemSpec, ev: PolicyEvaluation, samples: int, seed: int = 0,
                       box: float = 2.0) -> List[str]:
    """
    Midpoint convexity of H (adjoint slots drawn from the solution) along each
    argument and jointly, and of Phi and gamma. Returns the failing checks.
    """
    adjoint = _require_adjoint(ev)
    c = spec.coefficients
    rng = np.random.default_rng(seed)
    P, N = ev.fwd.path_count, ev.grid.N
    paths = rng.integers(0, P, size=samples)
    steps = rng.integers(0, N, size=samples)
    failures: List[str] = []

    def slots_point(state: Dict, step_times: np.ndarray) -> List[HamiltonianPoint]:
        return [HamiltonianPoint(
            t=ev.grid.t(int(s)), x=state["x"][i:i + 1], y=state["y"][i:i + 1],
            z1=state["z1"][i:i + 1], z2=state["z2"][i:i + 1],
            Lambda=state["Lambda"][i:i + 1], u=state["u"][i:i + 1],
            p=adjoint.p_hat[paths[i]:paths[i] + 1, s], q1=adjoint.q1[paths[i]:paths[i] + 1, s],
            q2=adjoint.q2[paths[i]:paths[i] + 1, s], q3=adjoint.q3[paths[i]:paths[i] + 1, s],
            k=adjoint.k[paths[i]:paths[i] + 1, s], R2adj=adjoint.r2adj[paths[i]:paths[i] + 1, s],
        ) for i, s in enumerate(step_times)]

    def H_values(state: Dict) -> np.ndarray:
        return np.array([eval_H(spec, pt)[0] for pt in slots_point(state, steps)])

    a = _random_state(spec, rng, samples, box)
    for label in DIRECTIONS + ("joint",):
        b = _random_state(spec, rng, samples, box)
        if label != "joint":
            b = {**a, label: b[label]}
        mid = {key: 0.5 * (a[key] + b[key]) for key in a}
        if np.any(_midpoint_violation(H_values(a), H_values(b), H_values(mid))):
            failures.append(f"H:{label}")

    xa, xb = a["x"], _random_state(spec, rng, samples, box)["x"]
    if np.any(_midpoint_violation(c.Phi(xa), c.Phi(xb), c.Phi(0.5 * (xa + xb)))):
        failures.append("Phi")
    ya, yb = a["y"], _random_state(spec, rng, samples, box)["y"]
    if np.any(_midpoint_violation(c.gamma(ya), c.gamma(yb), c.gamma(0.5 * (ya + yb)))):
        failures.append("gamma")
    return failures


def control_offsets(control_set: ControlSet, u: np.ndarray, grid_size: int,
                    max_points: int = 4096) -> np.ndarray:
    """
    Symmetric offset grid (zero included) spanning U along finite sides and
    the spread of the realised controls plus one along infinite sides, refined
    with log-spaced offsets down to 1e-4 of that width.
    """
    axes = []
    per_axis = max(3, min(grid_size, int(round(max_points ** (1.0 / control_set.K)))))
    per_axis += 1 - per_axis % 2
    for k in range(control_set.K):
        lo, hi = control_set.lower[k], control_set.upper[k]
        if np.isfinite(lo) and np.isfinite(hi):
            width = hi - lo
        else:
            width = float(np.ptp(u[..., k])) + 1.0
        fine = width * np.logspace(-4.0, 0.0, per_axis // 2 + 1)
        axes.append(np.unique(np.concatenate([np.linspace(-width, width, per_axis), fine, -fine])))
    return np.array(list(itertools.product(*axes)))


def minimization_residual(spec: ProblemSpec, ev: PolicyEvaluation, include_average: bool,
                          grid_size: int = 21,
                          projection_basis: BasisSpec = PROJECTION_BASIS) -> float:
    """
    max over steps and paths of E[H(u_bar) - H(v) | Y] over v = Proj_U(u_bar + d),
    floored at 0. Offsets around the realised control keep the u-dependent
    part of the difference inside the span of the projection basis.
    """
    adjoint = _require_adjoint(ev)
    fwd = ev.fwd
    offsets = control_offsets(spec.control_set, fwd.u, grid_size)
    features = observation_features(fwd, include_average)
    worst = 0.0
    for n in range(ev.grid.N):
        pt = adjoint_point(spec, fwd, ev.state, adjoint, ev.grid, n)
        H_bar = eval_H(spec, pt)
        columns = [H_bar - eval_H(spec, pt.with_values(u=spec.control_set.project(pt.u + d)))
                   for d in offsets]
        values = np.stack(columns, axis=1)[:, None, :]
        proj = conditional_projection(values, fwd.rho[:, n, None], features[:, n:n + 1],
                                      projection_basis).values[:, 0]
        worst = max(worst, float(proj.max()))
    return max(worst, 0.0)


@trace_operation("sufficient_check")
def sufficient_check(spec: ProblemSpec, policy: ControlLaw, noise: NoiseBundle, grid: TimeGrid,
                     basis: BasisSpec, convexity_samples: int = 100,
                     picard: Optional[PicardSettings] = None, tol: float = 1e-3,
                     grid_size: int = 21, seed: int = 0,
                     evaluation: Optional[PolicyEvaluation] = None) -> SufficientCertificate:
    check_structural_case(spec)
    ev = evaluation or run_policy(spec, policy, noise, grid, basis, picard)
    failures = convexity_failures(spec, ev, convexity_samples, seed)
    residual = minimization_residual(spec, ev, policy_includes_average(policy), grid_size)
    cert = SufficientCertificate(convexity_pass=not failures, convexity_failures=failures,
                                 minimization_residual=residual, tol=tol)
    get_metrics().record_check("sufficient", cert.passed)
    log_check_result(logger, "sufficient", cert.passed,
                     {"convexity_failures": failures, "minimization_residual": residual})
    return cert


# =============================================================================
# REPORT
# =============================================================================

@trace_operation("optimality_report")
def optimality_report(spec: ProblemSpec, policy: ControlPolicy, noise: NoiseBundle,
                      grid: TimeGrid, basis: BasisSpec,
                      picard: Optional[PicardSettings] = None,
                      sufficient_tol: float = 1e-3, convexity_samples: int = 100,
                      minimization_grid: int = 21,
                      evaluation: Optional[PolicyEvaluation] = None) -> OptimalityReport:
    """
    Cost, derivative along the projected-gradient step, necessary residual
    and, in the structural case, the sufficient certificate.
    """
    ev = evaluation or run_policy(spec, policy, noise, grid, basis, picard)
    gf = compute_gradient_field(spec, policy, noise, grid, basis, picard, evaluation=ev)
    u = ev.fwd.u
    step = spec.control_set.project(u - gf.class_field) - u
    certificate = None
    if is_structural_case(spec):
        certificate = sufficient_check(spec, policy, noise, grid, basis, convexity_samples,
                                       picard, sufficient_tol, minimization_grid, evaluation=ev)
    return OptimalityReport(
        cost=cost_of(spec, ev),
        directional_derivative=directional_derivative_from_delta(gf.Hu, ev.fwd.rho, step,
                                                                 grid.dt),
        necessary_residual=necessary_residual_from_field(u, gf.class_field, spec.control_set),
        conditional_residual=necessary_residual_from_field(u, gf.projected, spec.control_set),
        sufficient_certificate=certificate,
        adjoint_sweeps=ev.adjoint.sweeps if ev.adjoint is not None else 0,
        paths=noise.path_count,
        steps=grid.N,
    )
