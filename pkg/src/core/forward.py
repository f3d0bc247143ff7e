"""
pomp-core - Forward System
==========================

Observation-feedback control policies and the Euler simulation of the state
x, the observation Y and the Girsanov density rho under the reference
measure (where Y is a Brownian motion):

    x_{n+1} = x_n + (b - sigma2 h) dt + sigma1 dW + sigma2 dY + sum_i g_i (dN_i - nu_i dt)
    rho_{n+1} = rho_n exp(h dY - h^2 dt / 2)

All coefficients are evaluated at the left point (t_n, x_n, u_n).
"""

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Protocol, Union

import numpy as np

from src.core.export import write_csv
from src.core.noise import NoiseBundle, TimeGrid, make_grid, sample_noise
from src.core.parallel import map_ranges, path_ranges
from src.data.exceptions import ForwardSimulationError, ProblemDefinitionError
from src.data.problem_model import ControlSet, ProblemSpec
from src.observability.logging import log_simulation
from src.observability.metrics import get_metrics
from src.observability.tracing import trace_operation

logger = logging.getLogger("pomp.forward")

SIMULATION_CHUNK_PATHS = 16384


# =============================================================================
# POLICIES
# =============================================================================

class ControlLaw(Protocol):
    """Anything that maps observation features at step n to controls in U."""

    control_dim: int
    steps: int
    uses_running_average: bool

    def controls(self, step: int, y_now: np.ndarray, y_avg: np.ndarray) -> np.ndarray:
        ...


@dataclass(frozen=True, eq=False)
class ControlPolicy:
    """
    u_n = Proj_U(theta_b . phi_n) with phi_n = (1, Y_n[, running mean of Y_0..Y_n])
    and b the time block containing step n.

    theta has shape (blocks, K, F). With blocks == steps there is one
    coefficient set per grid step.
    """
    theta: np.ndarray
    steps: int
    control_set: ControlSet
    use_running_average: bool = False
    feature_clamp: float = 10.0

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float)
        if theta.ndim != 3:
            raise ProblemDefinitionError(f"theta must be (blocks, K, F), got shape {theta.shape}")
        if theta.shape[2] != self.feature_count:
            raise ProblemDefinitionError(
                f"theta has {theta.shape[2]} feature coefficients, expected {self.feature_count}"
            )
        if theta.shape[1] != self.control_set.K:
            raise ProblemDefinitionError("theta control dimension does not match the control set")
        if not 1 <= theta.shape[0] <= self.steps:
            raise ProblemDefinitionError(f"blocks must lie in [1, {self.steps}], got {theta.shape[0]}")
        theta.flags.writeable = False
        object.__setattr__(self, "theta", theta)

    # --- construction ------------------------------------------------------

    @classmethod
    def zeros(cls, control_set: ControlSet, steps: int, blocks: Optional[int] = None,
              use_running_average: bool = False, feature_clamp: float = 10.0) -> "ControlPolicy":
        F = 3 if use_running_average else 2
        return cls(np.zeros((blocks or steps, control_set.K, F)), steps, control_set,
                   use_running_average, feature_clamp)

    @classmethod
    def affine(cls, control_set: ControlSet, steps: int, bias, gain, average_gain=None,
               blocks: Optional[int] = None, feature_clamp: float = 10.0) -> "ControlPolicy":
        """Same (bias, gain[, average gain]) in every block."""
        use_avg = average_gain is not None
        K = control_set.K
        columns = [np.broadcast_to(bias, (K,)), np.broadcast_to(gain, (K,))]
        if use_avg:
            columns.append(np.broadcast_to(average_gain, (K,)))
        coeffs = np.stack(columns, axis=-1)
        theta = np.broadcast_to(coeffs, (blocks or steps, K, coeffs.shape[-1])).copy()
        return cls(theta, steps, control_set, use_avg, feature_clamp)

    def with_theta(self, theta: np.ndarray) -> "ControlPolicy":
        return ControlPolicy(theta, self.steps, self.control_set,
                             self.use_running_average, self.feature_clamp)

    def resampled(self, steps: int) -> "ControlPolicy":
        """Same time-blocked law on a grid with a different step count."""
        if self.blocks > steps:
            raise ProblemDefinitionError(f"cannot spread {self.blocks} blocks over {steps} steps")
        return ControlPolicy(self.theta, steps, self.control_set,
                             self.use_running_average, self.feature_clamp)

    # --- evaluation --------------------------------------------------------

    @property
    def blocks(self) -> int:
        return self.theta.shape[0]

    @property
    def control_dim(self) -> int:
        return self.control_set.K

    @property
    def feature_count(self) -> int:
        return 3 if self.use_running_average else 2

    @property
    def uses_running_average(self) -> bool:
        return self.use_running_average

    def block_of(self, step: int) -> int:
        return step * self.blocks // self.steps

    def block_steps(self, block: int) -> range:
        start = -(-block * self.steps // self.blocks)
        stop = -(-(block + 1) * self.steps // self.blocks)
        return range(start, stop)

    def features(self, y_now: np.ndarray, y_avg: np.ndarray) -> np.ndarray:
        """(P, F) feature matrix; Y features are clamped when U is unbounded."""
        y_now = np.asarray(y_now, dtype=float)
        columns = [np.ones_like(y_now), y_now]
        if self.use_running_average:
            columns.append(np.asarray(y_avg, dtype=float))
        phi = np.stack(columns, axis=-1)
        if not self.control_set.is_bounded:
            phi[..., 1:] = np.clip(phi[..., 1:], -self.feature_clamp, self.feature_clamp)
        return phi

    def controls(self, step: int, y_now: np.ndarray, y_avg: np.ndarray) -> np.ndarray:
        if not 0 <= step < self.steps:
            raise ValueError(f"step {step} outside [0, {self.steps})")
        phi = self.features(y_now, y_avg)
        raw = np.einsum("kf,...f->...k", self.theta[self.block_of(step)], phi)
        return self.control_set.project(raw)

    # --- serialization -----------------------------------------------------

    def to_dict(self) -> Dict[str, Any]:
        return {
            "theta": self.theta.tolist(),
            "steps": self.steps,
            "use_running_average": self.use_running_average,
            "feature_clamp": self.feature_clamp,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], control_set: ControlSet) -> "ControlPolicy":
        return cls(np.asarray(data["theta"], dtype=float), int(data["steps"]), control_set,
                   bool(data.get("use_running_average", False)),
                   float(data.get("feature_clamp", 10.0)))


@dataclass(frozen=True, eq=False)
class PerturbedPolicy:
    """Convex perturbation u^eps = u_bar + eps (u - u_bar) on the same Y-path."""
    base: ControlLaw
    target: ControlLaw
    eps: float

    def __post_init__(self):
        if self.base.steps != self.target.steps or self.base.control_dim != self.target.control_dim:
            raise ProblemDefinitionError("perturbed policies must share steps and control dimension")

    @property
    def control_dim(self) -> int:
        return self.base.control_dim

    @property
    def steps(self) -> int:
        return self.base.steps

    @property
    def uses_running_average(self) -> bool:
        return self.base.uses_running_average or self.target.uses_running_average

    @property
    def control_set(self) -> ControlSet:
        return self.base.control_set

    def controls(self, step: int, y_now: np.ndarray, y_avg: np.ndarray) -> np.ndarray:
        u_bar = self.base.controls(step, y_now, y_avg)
        u = self.target.controls(step, y_now, y_avg)
        mixed = u_bar + self.eps * (u - u_bar)
        if 0.0 <= self.eps <= 1.0:
            return mixed
        return self.control_set.project(mixed)


def evaluate_policy(policy: ControlLaw, Y_history: np.ndarray, step: int) -> np.ndarray:
    """
    Control at `step` from the observation history Y_0..Y_step.

    Y_history has shape (step+1+, ) for one path or (P, step+1+) for many.
    """
    if not 0 <= step < policy.steps:
        raise ValueError(f"step {step} outside [0, {policy.steps})")
    hist = np.asarray(Y_history, dtype=float)
    seen = hist[..., : step + 1]
    y_avg = np.cumsum(seen, axis=-1)[..., -1] / (step + 1)
    return policy.controls(step, seen[..., -1], y_avg)


# =============================================================================
# SIMULATION
# =============================================================================

@dataclass(frozen=True, eq=False)
class ForwardPath:
    """Sampled forward trajectories on the grid."""
    x: np.ndarray          # (P, N+1, n)
    Y: np.ndarray          # (P, N+1)
    Y_avg: np.ndarray      # (P, N+1) running mean of Y_0..Y_n
    rho: np.ndarray        # (P, N+1)
    u: np.ndarray          # (P, N, K)
    h: np.ndarray          # (P, N) observation drift at the left points
    grid: TimeGrid = field(compare=False)

    @property
    def path_count(self) -> int:
        return self.x.shape[0]

    def observation_features(self, step: int, include_average: bool) -> np.ndarray:
        columns = [self.Y[:, step]]
        if include_average:
            columns.append(self.Y_avg[:, step])
        return np.stack(columns, axis=1)


def observation_paths(noise: NoiseBundle) -> tuple:
    """(Y, running mean of Y) from the observation increments."""
    P, N = noise.dY.shape
    Y = np.zeros((P, N + 1))
    Y[:, 1:] = np.cumsum(noise.dY, axis=1)
    Y_avg = np.cumsum(Y, axis=1) / np.arange(1, N + 2)
    return Y, Y_avg


def _check_inputs(spec: ProblemSpec, policy: ControlLaw, noise: NoiseBundle, grid: TimeGrid):
    if noise.grid.N != grid.N or not np.isclose(noise.grid.T, grid.T):
        raise ProblemDefinitionError(f"noise grid {noise.grid} does not match {grid}")
    if not np.isclose(spec.T, grid.T):
        raise ProblemDefinitionError(f"grid horizon {grid.T} differs from problem horizon {spec.T}")
    if noise.M != spec.M:
        raise ProblemDefinitionError(f"noise has {noise.M} mark streams, problem has {spec.M}")
    if policy.steps != grid.N:
        raise ProblemDefinitionError(f"policy built for {policy.steps} steps, grid has {grid.N}")
    if policy.control_dim != spec.K:
        raise ProblemDefinitionError(f"policy has {policy.control_dim} controls, problem has K={spec.K}")


def _simulate_range(spec: ProblemSpec, policy: ControlLaw, noise: NoiseBundle,
                    grid: TimeGrid, Y: np.ndarray, Y_avg: np.ndarray, offset: int):
    bundle = spec.coefficients
    P, N, dt = noise.path_count, grid.N, grid.dt
    comp = noise.compensated_jumps()
    x = np.empty((P, N + 1, spec.n))
    rho = np.empty((P, N + 1))
    u = np.empty((P, N, spec.K))
    h_path = np.empty((P, N))
    x[:, 0] = np.asarray(spec.x0, dtype=float)
    rho[:, 0] = 1.0

    for n in range(N):
        t = grid.t(n)
        xn = x[:, n]
        un = policy.controls(n, Y[:, n], Y_avg[:, n])
        h = bundle.h(t, xn, un)
        s2 = bundle.sigma2(t, xn, un)
        drift = bundle.b(t, xn, un) - s2 * h[:, None]
        jumps = np.einsum("pjm,pm->pj", bundle.g(t, xn, un), comp[:, n, :])
        x[:, n + 1] = (xn + drift * dt + bundle.sigma1(t, xn, un) * noise.dW[:, n, None]
                       + s2 * noise.dY[:, n, None] + jumps)
        rho[:, n + 1] = rho[:, n] * np.exp(h * noise.dY[:, n] - 0.5 * h * h * dt)
        u[:, n] = un
        h_path[:, n] = h

        finite = np.isfinite(x[:, n + 1]).all(axis=1) & np.isfinite(rho[:, n + 1])
        if not finite.all():
            bad = int(np.argmin(finite))
            quantity = "x" if not np.isfinite(x[bad, n + 1]).all() else "rho"
            raise ForwardSimulationError(path=offset + bad, step=n + 1, quantity=quantity)

    return x, rho, u, h_path


@trace_operation("simulate_forward")
def simulate_forward(spec: ProblemSpec, policy: ControlLaw, noise: NoiseBundle,
                     grid: TimeGrid, workers: Optional[int] = None) -> ForwardPath:
    _check_inputs(spec, policy, noise, grid)
    start_time = time.perf_counter()
    Y, Y_avg = observation_paths(noise)

    def run(path_range):
        a, b = path_range
        return _simulate_range(spec, policy, noise.slice(a, b), grid, Y[a:b], Y_avg[a:b], a)

    parts = map_ranges(run, path_ranges(noise.path_count, SIMULATION_CHUNK_PATHS), workers)
    fwd = ForwardPath(
        x=np.concatenate([p[0] for p in parts]),
        Y=Y, Y_avg=Y_avg,
        rho=np.concatenate([p[1] for p in parts]),
        u=np.concatenate([p[2] for p in parts]),
        h=np.concatenate([p[3] for p in parts]),
        grid=grid,
    )
    get_metrics().record_paths(noise.path_count)
    log_simulation(logger, noise.path_count, grid.N, time.perf_counter() - start_time)
    return fwd


# =============================================================================
# DIAGNOSTICS & EXPORT
# =============================================================================

def martingale_summary(fwd: ForwardPath) -> Dict[str, np.ndarray]:
    """Per-step mean of rho, its standard error and z-score against 1."""
    P = fwd.path_count
    mean = fwd.rho.mean(axis=0)
    stderr = fwd.rho.std(axis=0, ddof=1) / np.sqrt(P) if P > 1 else np.zeros_like(mean)
    gap = mean - 1.0
    z = np.divide(gap, stderr, out=np.where(gap == 0, 0.0, np.inf), where=stderr > 0)
    return {"t": fwd.grid.nodes, "mean": mean, "stderr": stderr, "z": z}


def moment_stability(spec: ProblemSpec, policy: ControlPolicy, paths: int, seed: int,
                     N: int) -> Dict[str, float]:
    """sup_n mean|x_n|^4 at N and 2N steps and their ratio."""
    moments = []
    for steps in (N, 2 * N):
        grid = make_grid(spec.T, steps)
        noise = sample_noise(grid, spec.mark_space, paths, seed)
        fwd = simulate_forward(spec, policy.resampled(steps), noise, grid)
        norms = np.linalg.norm(fwd.x, axis=2) ** 4
        moments.append(float(norms.mean(axis=0).max()))
    return {"coarse": moments[0], "fine": moments[1], "ratio": moments[1] / moments[0]}


def export_paths_csv(fwd: ForwardPath, destination: Union[str, Path],
                     max_paths: Optional[int] = None,
                     header: Optional[Mapping[str, Any]] = None) -> Path:
    P, N1, n = fwd.x.shape
    K = fwd.u.shape[2]
    count = P if max_paths is None else min(P, max_paths)
    columns = (["path", "step", "t"] + [f"x_{j}" for j in range(n)] + ["Y", "rho"]
               + [f"u_{k}" for k in range(K)])
    nodes = fwd.grid.nodes

    def rows():
        for p in range(count):
            for step in range(N1):
                u = fwd.u[p, step].tolist() if step < N1 - 1 else [None] * K
                yield [p, step, nodes[step], *fwd.x[p, step].tolist(),
                       fwd.Y[p, step], fwd.rho[p, step], *u]

    return write_csv(destination, columns, rows(), header)
