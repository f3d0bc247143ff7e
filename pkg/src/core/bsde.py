"""
pomp-core - BSDE Engine
=======================

Least-squares Monte Carlo solvers run backward along one forward pass:

- solve_state_bsde: (y, z1, z2, Lambda) with y_N = phi(x_N) and
      y_n = E_n[y_{n+1}] - (f - z2 h) dt
- solve_cost_bsde: (r, R1, R2, R3) with r_N = Phi(x_N) and
      r_n = E_n[r_{n+1}] + (l + R2 h) dt
- solve_adjoint: the coupled costate system, k forward from -gamma_y(y_0)
  and p backward from Phi_x - phi_x'k_N, by Picard sweeps

Martingale loadings come from regressing y_{n+1} times the increments
(dW, dY, compensated jump counts) on the step-n regression variables.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, List, Mapping, Optional, Tuple, Union

import numpy as np

from src.core.export import write_csv
from src.core.forward import ControlLaw, ForwardPath
from src.core.hamiltonian import HamiltonianPoint, grad_H, lambda_density
from src.core.noise import NoiseBundle, TimeGrid
from src.core.regression import BasisSpec, RegressionFit, regress
from src.data.exceptions import AdjointConvergenceError, ProblemDefinitionError, RegressionError
from src.data.problem_model import ProblemSpec
from src.observability.logging import log_picard_sweep, log_regression_failure
from src.observability.metrics import get_metrics
from src.observability.tracing import add_span_attributes, add_span_event, trace_operation

logger = logging.getLogger("pomp.bsde")


@dataclass(frozen=True)
class PicardSettings:
    max_sweeps: int = 20
    tol: float = 1e-8

    def __post_init__(self):
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be >= 1")
        if not self.tol > 0:
            raise ValueError("Picard tol must be > 0")


@dataclass(frozen=True, eq=False)
class BsdeSolution:
    y: np.ndarray          # (P, N+1, m)
    z1: np.ndarray         # (P, N, m)
    z2: np.ndarray         # (P, N, m)
    Lambda: np.ndarray     # (P, N, m, M)
    coefficients: List[np.ndarray] = field(default_factory=list)

    @property
    def y0(self) -> np.ndarray:
        """Fitted initial value (every path starts at the same point)."""
        return self.y[0, 0]


@dataclass(frozen=True, eq=False)
class CostBsdeSolution:
    r: np.ndarray          # (P, N+1)
    R1: np.ndarray         # (P, N)
    R2: np.ndarray         # (P, N)
    R3: np.ndarray         # (P, N, M)
    coefficients: List[np.ndarray] = field(default_factory=list)


@dataclass(frozen=True, eq=False)
class AdjointSolution:
    """
    Costate processes. p_hat_n is the one-step prediction of p_{n+1} under the
    controlled measure; trajectory Hamiltonians are evaluated with it.
    """
    p: np.ndarray          # (P, N+1, n)
    p_hat: np.ndarray      # (P, N, n)
    q1: np.ndarray         # (P, N, n)
    q2: np.ndarray         # (P, N, n)
    q3: np.ndarray         # (P, N, n, M)
    k: np.ndarray          # (P, N+1, m)
    r2adj: np.ndarray      # (P, N)
    residuals: List[float] = field(default_factory=list)

    @property
    def sweeps(self) -> int:
        return len(self.residuals)


# =============================================================================
# REGRESSION PLUMBING
# =============================================================================

def regression_variables(fwd: ForwardPath, step: int, basis: BasisSpec,
                         include_average: bool, k: Optional[np.ndarray] = None) -> np.ndarray:
    """(P, F) matrix of the step-`step` regression variables."""
    columns = []
    if basis.uses("x", True):
        columns.append(fwd.x[:, step])
    if basis.uses("Y", True):
        columns.append(fwd.Y[:, step, None])
    if basis.uses("Y_avg", include_average):
        columns.append(fwd.Y_avg[:, step, None])
    if k is not None and basis.uses("k", True):
        columns.append(k)
    if not columns:
        return np.zeros((fwd.path_count, 0))
    return np.concatenate(columns, axis=1)


def _increment_targets(values: np.ndarray, dW: np.ndarray, dY: np.ndarray,
                       comp: np.ndarray) -> np.ndarray:
    """[v, v dW, v dY, v dN~_1, ..., v dN~_M] stacked column-wise; v is (P, d)."""
    blocks = [values, values * dW[:, None], values * dY[:, None]]
    blocks.extend(values * comp[:, i, None] for i in range(comp.shape[1]))
    return np.concatenate(blocks, axis=1)


def _split_loadings(fitted: np.ndarray, d: int, nu: np.ndarray, dt: float):
    """Undo _increment_targets: (E[v], v-dW loading, v-dY loading, jump loading (P, d, M))."""
    mean = fitted[:, :d]
    z1 = fitted[:, d:2 * d] / dt
    z2 = fitted[:, 2 * d:3 * d] / dt
    M = nu.shape[0]
    jumps = np.zeros((fitted.shape[0], d, M))
    for i in range(M):
        if nu[i] > 0:
            jumps[:, :, i] = fitted[:, (3 + i) * d:(4 + i) * d] / (nu[i] * dt)
    return mean, z1, z2, jumps


def _regress_step(stage: str, step: int, features: np.ndarray, targets: np.ndarray,
                  basis: BasisSpec) -> RegressionFit:
    try:
        fit = regress(features, targets, basis)
    except RegressionError as e:
        log_regression_failure(logger, stage, step, str(e))
        raise RegressionError(f"{stage} regression at step {step}: {e}") from e
    get_metrics().record_regressions(stage)
    return fit


def _check_forward(fwd: ForwardPath, noise: NoiseBundle, grid: TimeGrid) -> None:
    if fwd.x.shape[1] != grid.N + 1 or noise.grid.N != grid.N:
        raise ProblemDefinitionError("forward pass, noise and grid disagree on the step count")
    if fwd.path_count != noise.path_count:
        raise ProblemDefinitionError(
            f"forward pass has {fwd.path_count} paths, noise has {noise.path_count}"
        )


# =============================================================================
# STATE BSDE
# =============================================================================

@trace_operation("solve_state_bsde", {"stage": "state"})
def solve_state_bsde(spec: ProblemSpec, fwd: ForwardPath, noise: NoiseBundle, grid: TimeGrid,
                     basis: BasisSpec, include_average: bool = False) -> BsdeSolution:
    _check_forward(fwd, noise, grid)
    c = spec.coefficients
    P, N, dt, m, M = fwd.path_count, grid.N, grid.dt, spec.m, spec.M
    nu = spec.nu
    comp = noise.compensated_jumps()

    y = np.empty((P, N + 1, m))
    z1 = np.empty((P, N, m))
    z2 = np.empty((P, N, m))
    lam = np.empty((P, N, m, M))
    coefficients: List[np.ndarray] = [np.empty(0)] * N
    y[:, N] = c.phi(fwd.x[:, N])

    for n in range(N - 1, -1, -1):
        features = regression_variables(fwd, n, basis, include_average)
        targets = _increment_targets(y[:, n + 1], noise.dW[:, n], noise.dY[:, n], comp[:, n])
        fit = _regress_step("state", n, features, targets, basis)
        expected, z1[:, n], z2[:, n], lam[:, n] = _split_loadings(fit.fitted, m, nu, dt)
        coefficients[n] = fit.coefficients

        t, xn, un = grid.t(n), fwd.x[:, n], fwd.u[:, n]
        driver = c.f(t, xn, expected, z1[:, n], z2[:, n], lam[:, n], un)
        y[:, n] = expected - (driver - z2[:, n] * fwd.h[:, n, None]) * dt

    return BsdeSolution(y=y, z1=z1, z2=z2, Lambda=lam, coefficients=coefficients)


# =============================================================================
# COST BSDE
# =============================================================================

@trace_operation("solve_cost_bsde", {"stage": "cost"})
def solve_cost_bsde(spec: ProblemSpec, fwd: ForwardPath, noise: NoiseBundle, grid: TimeGrid,
                    basis: BasisSpec, include_average: bool = False,
                    state: Optional[BsdeSolution] = None) -> CostBsdeSolution:
    """
    Conditional cost-to-go under the controlled measure, written under the
    reference measure. The running cost reads (y, z1, z2, Lambda) from
    `state`, which is solved here when not supplied.
    """
    _check_forward(fwd, noise, grid)
    if state is None:
        state = solve_state_bsde(spec, fwd, noise, grid, basis, include_average)
    c = spec.coefficients
    P, N, dt, M = fwd.path_count, grid.N, grid.dt, spec.M
    nu = spec.nu
    comp = noise.compensated_jumps()

    r = np.empty((P, N + 1))
    R1 = np.empty((P, N))
    R2 = np.empty((P, N))
    R3 = np.empty((P, N, M))
    coefficients: List[np.ndarray] = [np.empty(0)] * N
    r[:, N] = c.Phi(fwd.x[:, N])

    for n in range(N - 1, -1, -1):
        features = regression_variables(fwd, n, basis, include_average)
        targets = _increment_targets(r[:, n + 1, None], noise.dW[:, n], noise.dY[:, n],
                                     comp[:, n])
        fit = _regress_step("cost", n, features, targets, basis)
        expected, l1, l2, l3 = _split_loadings(fit.fitted, 1, nu, dt)
        R1[:, n], R2[:, n], R3[:, n] = l1[:, 0], l2[:, 0], l3[:, 0]
        coefficients[n] = fit.coefficients

        running = running_cost(spec, fwd, state, grid, n)
        r[:, n] = expected[:, 0] + (running + R2[:, n] * fwd.h[:, n]) * dt

    return CostBsdeSolution(r=r, R1=R1, R2=R2, R3=R3, coefficients=coefficients)


# =============================================================================
# ADJOINT
# =============================================================================

def trajectory_point(spec: ProblemSpec, fwd: ForwardPath, state: BsdeSolution, grid: TimeGrid,
                     step: int, p: np.ndarray, q1: np.ndarray, q2: np.ndarray, q3: np.ndarray,
                     k: np.ndarray, r2adj: np.ndarray, u: Optional[np.ndarray] = None
                     ) -> HamiltonianPoint:
    """Hamiltonian arguments along the sampled trajectory at `step`."""
    return HamiltonianPoint(
        t=grid.t(step), x=fwd.x[:, step], y=state.y[:, step], z1=state.z1[:, step],
        z2=state.z2[:, step], Lambda=state.Lambda[:, step],
        u=fwd.u[:, step] if u is None else u,
        p=p, q1=q1, q2=q2, q3=q3, k=k, R2adj=r2adj,
    )


def adjoint_point(spec: ProblemSpec, fwd: ForwardPath, state: BsdeSolution,
                  adjoint: AdjointSolution, grid: TimeGrid, step: int,
                  u: Optional[np.ndarray] = None) -> HamiltonianPoint:
    n = step
    return trajectory_point(spec, fwd, state, grid, n, adjoint.p_hat[:, n], adjoint.q1[:, n],
                            adjoint.q2[:, n], adjoint.q3[:, n], adjoint.k[:, n],
                            adjoint.r2adj[:, n], u)


def _forward_k(spec: ProblemSpec, fwd: ForwardPath, noise: NoiseBundle, grid: TimeGrid,
               state: BsdeSolution, p_hat: np.ndarray, q1: np.ndarray, q2: np.ndarray,
               q3: np.ndarray, r2adj: np.ndarray) -> np.ndarray:
    """k_{n+1} = k_n - H_y dt - H_z1 dW - H_z2 (dY - h dt) - sum_i H_Lambda(e_i)/nu_i dN~_i."""
    c = spec.coefficients
    P, N, dt = fwd.path_count, grid.N, grid.dt
    comp = noise.compensated_jumps()
    k = np.empty((P, N + 1, spec.m))
    k[:, 0] = -c.gamma_y(state.y[:, 0])
    for n in range(N):
        pt = trajectory_point(spec, fwd, state, grid, n, p_hat[:, n], q1[:, n], q2[:, n],
                              q3[:, n], k[:, n], r2adj[:, n])
        dY_tilde = noise.dY[:, n] - fwd.h[:, n] * dt
        jump_loading = lambda_density(spec, grad_H(spec, pt, "Lambda"))
        k[:, n + 1] = (k[:, n]
                       - grad_H(spec, pt, "y") * dt
                       - grad_H(spec, pt, "z1") * noise.dW[:, n, None]
                       - grad_H(spec, pt, "z2") * dY_tilde[:, None]
                       - np.einsum("pji,pi->pj", jump_loading, comp[:, n]))
    return k


def _backward_p(spec: ProblemSpec, fwd: ForwardPath, noise: NoiseBundle, grid: TimeGrid,
                state: BsdeSolution, cost: CostBsdeSolution, k: np.ndarray,
                basis: BasisSpec, include_average: bool):
    c = spec.coefficients
    P, N, dt, n_dim, M = fwd.path_count, grid.N, grid.dt, spec.n, spec.M
    nu = spec.nu
    comp = noise.compensated_jumps()

    p = np.empty((P, N + 1, n_dim))
    p_hat = np.empty((P, N, n_dim))
    q1 = np.empty((P, N, n_dim))
    q2 = np.empty((P, N, n_dim))
    q3 = np.empty((P, N, n_dim, M))
    r2adj = np.empty((P, N))
    xN = fwd.x[:, N]
    p[:, N] = c.Phi_x(xN) - np.einsum("pa,pac->pc", k[:, N], c.phi_x(xN))

    for n in range(N - 1, -1, -1):
        features = regression_variables(fwd, n, basis, include_average, k[:, n])
        targets = _increment_targets(p[:, n + 1], noise.dW[:, n], noise.dY[:, n], comp[:, n])
        fit = _regress_step("adjoint", n, features, targets, basis)
        expected, q1[:, n], q2[:, n], q3[:, n] = _split_loadings(fit.fitted, n_dim, nu, dt)

        h = fwd.h[:, n]
        p_hat[:, n] = expected + q2[:, n] * h[:, None] * dt
        s2 = c.sigma2(grid.t(n), fwd.x[:, n], fwd.u[:, n])
        r2adj[:, n] = (cost.R2[:, n] - np.einsum("pa,pa->p", s2, p_hat[:, n])
                       - np.einsum("pa,pa->p", state.z2[:, n], k[:, n]))
        pt = trajectory_point(spec, fwd, state, grid, n, p_hat[:, n], q1[:, n], q2[:, n],
                              q3[:, n], k[:, n], r2adj[:, n])
        p[:, n] = p_hat[:, n] + grad_H(spec, pt, "x") * dt

    return p, p_hat, q1, q2, q3, r2adj


@trace_operation("solve_adjoint", {"stage": "adjoint"})
def solve_adjoint(spec: ProblemSpec, fwd: ForwardPath, noise: NoiseBundle, grid: TimeGrid,
                  state: BsdeSolution, cost: CostBsdeSolution, basis: BasisSpec,
                  picard: Optional[PicardSettings] = None,
                  include_average: bool = False) -> AdjointSolution:
    """
    Picard sweeps: k^0 from zero costates, then p^s = backward(k^{s-1}) and
    k^s = forward(p^s). The residual of sweep s is the sup-norm change of k
    (and of p from the second sweep on). On convergence the returned pair
    (p^s, k^{s-1}) satisfies both boundary conditions exactly.
    """
    _check_forward(fwd, noise, grid)
    picard = picard or PicardSettings()
    P, N, n_dim, M = fwd.path_count, grid.N, spec.n, spec.M

    zeros = np.zeros((P, N, n_dim))
    k_prev = _forward_k(spec, fwd, noise, grid, state, zeros, zeros, zeros,
                        np.zeros((P, N, n_dim, M)), np.zeros((P, N)))
    p_prev: Optional[np.ndarray] = None
    residuals: List[float] = []

    for sweep in range(1, picard.max_sweeps + 1):
        p, p_hat, q1, q2, q3, r2adj = _backward_p(spec, fwd, noise, grid, state, cost, k_prev,
                                                  basis, include_average)
        k_new = _forward_k(spec, fwd, noise, grid, state, p_hat, q1, q2, q3, r2adj)
        residual = float(np.max(np.abs(k_new - k_prev))) if k_new.size else 0.0
        if p_prev is not None:
            residual = max(residual, float(np.max(np.abs(p - p_prev))))
        residuals.append(residual)
        get_metrics().record_picard_sweep()
        log_picard_sweep(logger, sweep, residual, picard.tol)
        add_span_event("picard_sweep", {"sweep": sweep, "residual": residual})

        if residual < picard.tol:
            add_span_attributes({"adjoint.sweeps": sweep, "adjoint.residual": residual})
            return AdjointSolution(p=p, p_hat=p_hat, q1=q1, q2=q2, q3=q3, k=k_prev,
                                   r2adj=r2adj, residuals=residuals)
        k_prev, p_prev = k_new, p

    raise AdjointConvergenceError(residuals, picard.tol)


# =============================================================================
# DIAGNOSTICS
# =============================================================================

def martingale_reconstruction_error(spec: ProblemSpec, solution: BsdeSolution, fwd: ForwardPath,
                                    noise: NoiseBundle, grid: TimeGrid) -> float:
    """
    Mean-square gap between y_{n+1} and its one-step reconstruction
    y_n + (f - z2 h) dt + z1 dW + z2 dY + sum_i Lambda_i dN~_i, averaged over steps.
    """
    c = spec.coefficients
    dt = grid.dt
    comp = noise.compensated_jumps()
    total = 0.0
    for n in range(grid.N):
        y_n = solution.y[:, n]
        driver = c.f(grid.t(n), fwd.x[:, n], y_n, solution.z1[:, n], solution.z2[:, n],
                     solution.Lambda[:, n], fwd.u[:, n])
        rebuilt = (y_n + (driver - solution.z2[:, n] * fwd.h[:, n, None]) * dt
                   + solution.z1[:, n] * noise.dW[:, n, None]
                   + solution.z2[:, n] * noise.dY[:, n, None]
                   + np.einsum("pji,pi->pj", solution.Lambda[:, n], comp[:, n]))
        total += float(np.mean(np.sum((solution.y[:, n + 1] - rebuilt) ** 2, axis=1)))
    return total / grid.N


def running_cost(spec: ProblemSpec, fwd: ForwardPath, state: BsdeSolution, grid: TimeGrid,
                 step: int) -> np.ndarray:
    """l at the left point of `step`, reading (y, z1, z2, Lambda) from the state BSDE."""
    return spec.coefficients.l(grid.t(step), fwd.x[:, step], state.y[:, step],
                               state.z1[:, step], state.z2[:, step], state.Lambda[:, step],
                               fwd.u[:, step])


def cost_samples(spec: ProblemSpec, fwd: ForwardPath, state: BsdeSolution,
                 grid: TimeGrid) -> np.ndarray:
    """Per-path rho_N Phi(x_N) + sum_n rho_n l_n dt."""
    samples = fwd.rho[:, -1] * spec.coefficients.Phi(fwd.x[:, -1])
    for n in range(grid.N):
        samples = samples + fwd.rho[:, n] * running_cost(spec, fwd, state, grid, n) * grid.dt
    return samples


def bayes_identity_gap(spec: ProblemSpec, fwd: ForwardPath, state: BsdeSolution,
                       cost: CostBsdeSolution, grid: TimeGrid) -> Tuple[float, float]:
    """
    E[rho_N Phi(x_N) + sum_n rho_n l_n dt] - r_0 and the standard error of
    the Monte-Carlo side.
    """
    samples = cost_samples(spec, fwd, state, grid)
    stderr = float(samples.std(ddof=1) / np.sqrt(samples.size)) if samples.size > 1 else 0.0
    return float(samples.mean() - cost.r[0, 0]), stderr


def export_bsde_summary(solution: BsdeSolution, grid: TimeGrid,
                        destination: Union[str, Path],
                        header: Optional[Mapping[str, Any]] = None) -> Path:
    """Per-step mean and standard deviation of y, z1, z2 and Lambda."""
    m = solution.y.shape[2]
    M = solution.Lambda.shape[3]
    names: List[Tuple[str, Any]] = []
    for j in range(m):
        names += [(f"y_{j}", lambda n, j=j: solution.y[:, n, j]),
                  (f"z1_{j}", lambda n, j=j: solution.z1[:, n, j]),
                  (f"z2_{j}", lambda n, j=j: solution.z2[:, n, j])]
        names += [(f"Lambda_{j}_{i}", lambda n, j=j, i=i: solution.Lambda[:, n, j, i])
                  for i in range(M)]
    columns = ["step", "t"] + [f"{name}_{stat}" for name, _ in names for stat in ("mean", "std")]
    nodes = grid.nodes

    def rows():
        for n in range(grid.N + 1):
            row: List[Any] = [n, nodes[n]]
            for name, getter in names:
                if n == grid.N and not name.startswith("y_"):
                    row += [None, None]
                    continue
                values = getter(n)
                row += [values.mean(), values.std()]
            yield row

    return write_csv(destination, columns, rows(), header)


def policy_includes_average(policy: ControlLaw) -> bool:
    return bool(getattr(policy, "uses_running_average", False))


