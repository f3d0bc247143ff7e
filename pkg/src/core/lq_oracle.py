"""
pomp-core - Linear-quadratic reference solutions
================================================

ODE oracles for the builtin scalar LQ problem under the controlled measure,
where x follows dx = (a x + b_u u + b0) dt + c1 dW + c2 dW' + jump_size dN~:

- riccati_solution: full-information optimal value V(t, x) = P x^2 / 2 + s x + c
- open_loop_moments: exact cost and initial costate of a deterministic control
- discrete_lqr: Euler-discretised noise-free LQR feedback

The open-loop costate is valid while the observation drift does not depend
on x (hx = 0) and gamma_weight = fy = 0, so k vanishes; h0 itself is free.
"""

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np
from scipy.integrate import solve_ivp

from src.data.builtin_problems import LqParams

ControlPath = Union[float, Callable[[float], float]]

RTOL = 1e-10
ATOL = 1e-12


def _noise_variance_rate(params: LqParams) -> float:
    return params.c1 ** 2 + params.c2 ** 2 + params.intensity * params.jump_size ** 2


@dataclass(frozen=True)
class RiccatiSolution:
    times: np.ndarray
    P: np.ndarray
    s: np.ndarray
    c: np.ndarray
    params: LqParams

    def value(self, x0: float) -> float:
        """Optimal full-information cost from (0, x0)."""
        return float(0.5 * self.P[0] * x0 ** 2 + self.s[0] * x0 + self.c[0])

    def feedback(self, t: float, x: float) -> float:
        """u*(t, x) = -b_u (P x + s) / qu."""
        P = float(np.interp(t, self.times, self.P))
        s = float(np.interp(t, self.times, self.s))
        return -self.params.b_u * (P * x + s) / self.params.qu


def riccati_solution(params: LqParams, points: int = 1001) -> RiccatiSolution:
    """
    Backward system
        P' = -(qx + 2 a P - b_u^2 P^2 / qu)                 P(T) = wT
        s' = -(lx + P b0 + a s - b_u^2 P s / qu)             s(T) = 0
        c' = -(l0 + s b0 - b_u^2 s^2 / (2 qu) + P v / 2)    c(T) = 0
    with v the variance rate of the noise. Control bounds are ignored.
    """
    if params.qu <= 0:
        raise ValueError("the Riccati oracle needs qu > 0")
    p = params
    v = _noise_variance_rate(p)
    gain = p.b_u ** 2 / p.qu

    def rhs(t, state):
        P, s, _ = state
        return [
            -(p.qx + 2.0 * p.a * P - gain * P * P),
            -(p.lx + P * p.b0 + p.a * s - gain * P * s),
            -(p.l0 + s * p.b0 - 0.5 * gain * s * s + 0.5 * P * v),
        ]

    times = np.linspace(p.T, 0.0, points)
    sol = solve_ivp(rhs, (p.T, 0.0), [p.wT, 0.0, 0.0], t_eval=times, rtol=RTOL, atol=ATOL)
    if not sol.success:
        raise RuntimeError(f"Riccati integration failed: {sol.message}")
    order = np.argsort(sol.t)
    return RiccatiSolution(times=sol.t[order], P=sol.y[0][order], s=sol.y[1][order],
                           c=sol.y[2][order], params=p)


@dataclass(frozen=True)
class OpenLoopMoments:
    cost: float
    costate0: float
    mean_T: float
    variance_T: float


def _control_function(control: ControlPath) -> Callable[[float], float]:
    if callable(control):
        return control
    value = float(control)
    return lambda t: value


def open_loop_moments(params: LqParams, control: ControlPath = 0.0,
                      max_step: float = np.inf) -> OpenLoopMoments:
    """
    Cost and p_0 of a deterministic control u(t).

    Forward:  m' = a m + b_u u + b0,  w' = 2 a w + v,  running cost accumulated
    in the third component; backward: pi' = -(lx + qx m + a pi), pi(T) = wT m(T).
    Pass max_step no larger than the grid step for piecewise-constant controls.
    """
    p = params
    u = _control_function(control)
    v = _noise_variance_rate(p)

    def forward(t, state):
        m, w, _ = state
        ut = u(t)
        running = p.l0 + p.lx * m + 0.5 * (p.qx * (w + m * m) + p.qu * ut * ut)
        return [p.a * m + p.b_u * ut + p.b0, 2.0 * p.a * w + v, running]

    fwd = solve_ivp(forward, (0.0, p.T), [p.x0, 0.0, 0.0], dense_output=True,
                    rtol=RTOL, atol=ATOL, max_step=max_step)
    if not fwd.success:
        raise RuntimeError(f"moment integration failed: {fwd.message}")
    m_T, w_T, running_T = fwd.y[:, -1]
    cost = running_T + 0.5 * p.wT * (w_T + m_T ** 2)

    def backward(t, state):
        m = fwd.sol(t)[0]
        return [-(p.lx + p.qx * m + p.a * state[0])]

    bwd = solve_ivp(backward, (p.T, 0.0), [p.wT * m_T], rtol=RTOL, atol=ATOL,
                    max_step=max_step)
    if not bwd.success:
        raise RuntimeError(f"costate integration failed: {bwd.message}")
    return OpenLoopMoments(cost=float(cost), costate0=float(bwd.y[0, -1]),
                           mean_T=float(m_T), variance_T=float(w_T))


@dataclass(frozen=True)
class DiscreteLqr:
    gains: np.ndarray      # u_n = -gains[n] x_n
    P: np.ndarray          # cost-to-go weights, P[N] = wT

    def cost(self, x0: float) -> float:
        return float(0.5 * self.P[0] * x0 ** 2)


def discrete_lqr(params: LqParams, N: int) -> DiscreteLqr:
    """
    Noise-free Euler LQR for x_{n+1} = (1 + a dt) x_n + b_u dt u_n with cost
    sum (qx x^2 + qu u^2) dt / 2 + wT x_N^2 / 2 (b0, lx and l0 must be 0).
    """
    p = params
    if p.b0 != 0 or p.lx != 0 or p.l0 != 0:
        raise ValueError("discrete LQR covers the homogeneous problem only")
    dt = p.T / N
    A, B, Q, R = 1.0 + p.a * dt, p.b_u * dt, p.qx * dt, p.qu * dt
    P = np.empty(N + 1)
    gains = np.empty(N)
    P[N] = p.wT
    for n in range(N - 1, -1, -1):
        gains[n] = B * P[n + 1] * A / (R + B * B * P[n + 1])
        P[n] = Q + A * A * P[n + 1] - A * P[n + 1] * B * gains[n]
    return DiscreteLqr(gains=gains, P=P)
