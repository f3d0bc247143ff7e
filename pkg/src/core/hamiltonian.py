"""
pomp-core - Hamiltonian
=======================

H = l + <b, p> + <sigma1, q1> + <sigma2, q2> + sum_i <g(e_i), q3(e_i)> nu_i + <f, k> + R2adj h

evaluated in batch over a leading axis of points. The last slot R2adj is
normally supplied by the caller and held fixed when differentiating. When a
point carries the raw cost loading R2 instead, the slot is rebuilt as
R2 - sigma2'p - z2'k on every evaluation and the derivatives follow that
substitution through sigma2 and z2.
"""

import logging
from dataclasses import dataclass, field, fields, replace
from typing import Any, Dict, Optional, Tuple

import numpy as np

from src.data.exceptions import NonFiniteOutputError, ProblemDefinitionError
from src.data.problem_model import ProblemSpec

logger = logging.getLogger("pomp.hamiltonian")

DIRECTIONS = ("x", "y", "z1", "z2", "Lambda", "u")


@dataclass(frozen=True, eq=False)
class HamiltonianPoint:
    """
    A batch of P evaluation points.

    x (P, n)  y, z1, z2 (P, m)  Lambda (P, m, M)  u (P, K)
    p, q1, q2 (P, n)  q3 (P, n, M)  k (P, m)  R2adj (P,)
    """
    t: float
    x: np.ndarray
    y: np.ndarray
    z1: np.ndarray
    z2: np.ndarray
    Lambda: np.ndarray
    u: np.ndarray
    p: np.ndarray
    q1: np.ndarray
    q2: np.ndarray
    q3: np.ndarray
    k: np.ndarray
    R2adj: np.ndarray
    R2: Optional[np.ndarray] = field(default=None)

    @property
    def size(self) -> int:
        return self.x.shape[0]

    def with_values(self, **changes: Any) -> "HamiltonianPoint":
        return replace(self, **changes)

    def take(self, index) -> "HamiltonianPoint":
        """Sub-batch along the point axis."""
        changes = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, np.ndarray):
                changes[f.name] = value[index]
        return replace(self, **changes)

    @classmethod
    def zeros(cls, spec: ProblemSpec, size: int, t: float = 0.0) -> "HamiltonianPoint":
        n, m, K, M = spec.n, spec.m, spec.K, spec.M
        return cls(
            t=t, x=np.zeros((size, n)), y=np.zeros((size, m)), z1=np.zeros((size, m)),
            z2=np.zeros((size, m)), Lambda=np.zeros((size, m, M)), u=np.zeros((size, K)),
            p=np.zeros((size, n)), q1=np.zeros((size, n)), q2=np.zeros((size, n)),
            q3=np.zeros((size, n, M)), k=np.zeros((size, m)), R2adj=np.zeros(size),
        )


def sample_points(spec: ProblemSpec, count: int, seed: int, box: float = 1.0,
                  t: Optional[float] = None) -> HamiltonianPoint:
    """Uniform random points; controls are drawn inside U (clipped to the box)."""
    rng = np.random.default_rng(seed)
    n, m, K, M = spec.n, spec.m, spec.K, spec.M
    lower = np.maximum(np.asarray(spec.control_set.lower, dtype=float), -box)
    upper = np.minimum(np.asarray(spec.control_set.upper, dtype=float), box)

    def draw(*shape):
        return rng.uniform(-box, box, size=(count,) + shape)

    return HamiltonianPoint(
        t=float(rng.uniform(0.0, spec.T)) if t is None else t,
        x=draw(n), y=draw(m), z1=draw(m), z2=draw(m), Lambda=draw(m, M),
        u=lower + (upper - lower) * rng.uniform(0.0, 1.0, size=(count, K)),
        p=draw(n), q1=draw(n), q2=draw(n), q3=draw(n, M), k=draw(m), R2adj=draw(),
    )


def _args(pt: HamiltonianPoint) -> Tuple:
    return (pt.t, pt.x, pt.y, pt.z1, pt.z2, pt.Lambda, pt.u)


def _finite(label: str, value: np.ndarray, pt: HamiltonianPoint) -> np.ndarray:
    value = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(value)):
        bad = int(np.argwhere(~np.isfinite(value.reshape(value.shape[0], -1)))[0][0])
        raise NonFiniteOutputError(label, {"t": pt.t, "x": pt.x[bad].tolist(),
                                           "u": pt.u[bad].tolist()})
    return value


def _slot(spec: ProblemSpec, pt: HamiltonianPoint) -> np.ndarray:
    if pt.R2 is None:
        return pt.R2adj
    s2 = spec.coefficients.sigma2(pt.t, pt.x, pt.u)
    return pt.R2 - np.einsum("pa,pa->p", s2, pt.p) - np.einsum("pa,pa->p", pt.z2, pt.k)


def eval_H(spec: ProblemSpec, pt: HamiltonianPoint) -> np.ndarray:
    """H at every point of the batch, shape (P,)."""
    c = spec.coefficients
    t, x, u = pt.t, pt.x, pt.u
    args = _args(pt)
    value = (
        c.l(*args)
        + np.einsum("pa,pa->p", c.b(t, x, u), pt.p)
        + np.einsum("pa,pa->p", c.sigma1(t, x, u), pt.q1)
        + np.einsum("pa,pa->p", c.sigma2(t, x, u), pt.q2)
        + np.einsum("pai,pai,i->p", c.g(t, x, u), pt.q3, spec.nu)
        + np.einsum("pa,pa->p", c.f(*args), pt.k)
        + _slot(spec, pt) * c.h(t, x, u)
    )
    return _finite("H", value, pt)


def _state_derivative(spec: ProblemSpec, pt: HamiltonianPoint, wrt: str) -> np.ndarray:
    """Derivative in x or u: both enter every coefficient."""
    c = spec.coefficients
    t, x, u = pt.t, pt.x, pt.u
    args = _args(pt)
    d = lambda name: getattr(c, f"{name}_{wrt}")  # noqa: E731
    slot = _slot(spec, pt)
    grad = (
        d("l")(*args)
        + np.einsum("pa,pac->pc", pt.p, d("b")(t, x, u))
        + np.einsum("pa,pac->pc", pt.q1, d("sigma1")(t, x, u))
        + np.einsum("pa,pac->pc", pt.q2, d("sigma2")(t, x, u))
        + np.einsum("pai,i,paic->pc", pt.q3, spec.nu, d("g")(t, x, u))
        + np.einsum("pa,pac->pc", pt.k, d("f")(*args))
        + slot[:, None] * d("h")(t, x, u)
    )
    if pt.R2 is not None:
        h = c.h(t, x, u)
        grad = grad - h[:, None] * np.einsum("pa,pac->pc", pt.p, d("sigma2")(t, x, u))
    return grad


def grad_H(spec: ProblemSpec, pt: HamiltonianPoint, wrt: str) -> np.ndarray:
    """
    Partial derivative of eval_H.

    Shapes: x (P, n), u (P, K), y/z1/z2 (P, m), Lambda (P, m, M) with
    per-mark partials (see lambda_density for the nu-density).
    """
    c = spec.coefficients
    args = _args(pt)
    if wrt in ("x", "u"):
        grad = _state_derivative(spec, pt, wrt)
    elif wrt in ("y", "z1", "z2"):
        grad = getattr(c, f"l_{wrt}")(*args) + np.einsum(
            "pa,pac->pc", pt.k, getattr(c, f"f_{wrt}")(*args))
        if wrt == "z2" and pt.R2 is not None:
            grad = grad - c.h(pt.t, pt.x, pt.u)[:, None] * pt.k
    elif wrt == "Lambda":
        grad = c.l_lam(*args) + np.einsum("pa,pajc->pjc", pt.k, c.f_lam(*args))
    else:
        raise ProblemDefinitionError(f"cannot differentiate H with respect to '{wrt}'")
    return _finite(f"H_{wrt}", grad, pt)


def lambda_density(spec: ProblemSpec, H_lam: np.ndarray) -> np.ndarray:
    """Per-mark partials divided by nu_i; zero on marks with no mass."""
    nu = spec.nu
    safe = np.where(nu > 0, nu, 1.0)
    return np.where(nu > 0, H_lam / safe, 0.0)


# =============================================================================
# FINITE-DIFFERENCE CHECK
# =============================================================================

@dataclass
class GradientCheckReport:
    """Worst relative error of grad_H against central differences of eval_H."""
    max_rel_error: float
    tol: float
    worst_direction: str
    worst_point: int
    per_direction: Dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def to_dict(self) -> Dict[str, Any]:
        return {
            "max_rel_error": self.max_rel_error,
            "tol": self.tol,
            "passed": self.passed,
            "worst_direction": self.worst_direction,
            "worst_point": self.worst_point,
            "per_direction": dict(self.per_direction),
        }


def finite_diff_check(spec: ProblemSpec, pts: HamiltonianPoint, tol: float = 1e-6,
                      step: float = 1e-5) -> GradientCheckReport:
    """Compare grad_H with central differences of eval_H in every coordinate."""
    worst = (0.0, DIRECTIONS[0], 0)
    per_direction: Dict[str, float] = {}
    for wrt in DIRECTIONS:
        base = getattr(pts, wrt)
        analytic = grad_H(spec, pts, wrt).reshape(pts.size, -1)
        flat = base.reshape(pts.size, -1)
        direction_worst = 0.0
        for j in range(flat.shape[1]):
            h = step * np.maximum(1.0, np.abs(flat[:, j]))
            plus, minus = flat.copy(), flat.copy()
            plus[:, j] += h
            minus[:, j] -= h
            H_plus = eval_H(spec, pts.with_values(**{wrt: plus.reshape(base.shape)}))
            H_minus = eval_H(spec, pts.with_values(**{wrt: minus.reshape(base.shape)}))
            numeric = (H_plus - H_minus) / (2.0 * h)
            a = analytic[:, j]
            err = np.abs(a - numeric) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(numeric)))
            i = int(np.argmax(err))
            direction_worst = max(direction_worst, float(err[i]))
            if err[i] > worst[0]:
                worst = (float(err[i]), wrt, i)
        per_direction[wrt] = direction_worst

    report = GradientCheckReport(max_rel_error=worst[0], tol=tol, worst_direction=worst[1],
                                 worst_point=worst[2], per_direction=per_direction)
    logger.debug(
        "Hamiltonian gradient check",
        extra={"event_type": "hamiltonian_check", "max_rel_error": report.max_rel_error,
               "worst_direction": report.worst_direction},
    )
    return report
