"""
pomp-core - Builtin Problems

Scalar linear-quadratic benchmark and the registry that resolves builtin
problems by name (the config layer only ever sees names and params).

LQ dynamics under the controlled measure:
    dx = (a x + b_u u + b0) dt + c1 dW + c2 dW^u + jump_size dN~
    dY = (h0 + hx x) dt + dW^u
    dy = (f0 + fy y) dt + ... ,  y_T = phi0 x_T
    J  = E[ int (l0 + lx x + 1/2 qx x^2 + 1/2 qu u^2) dt + 1/2 wT x_T^2 ] + 1/2 gamma_weight y_0^2
"""

import logging
from typing import Any, Callable, Dict, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.data.exceptions import ConfigError
from src.data.problem_model import (
    CoefficientBundle,
    ControlSet,
    Dimensions,
    MarkSpace,
    ProblemSpec,
)

logger = logging.getLogger("pomp.registry")


class LqParams(BaseModel):
    """Scalar coefficients of the LQ benchmark."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    a: float = -1.0
    b_u: float = 1.0
    b0: float = 0.0
    c1: float = 0.5
    c2: float = 0.3
    jump_size: float = 0.2
    intensity: float = Field(default=1.0, ge=0.0)
    h0: float = 0.5
    hx: float = 0.0
    f0: float = 0.0
    fy: float = 0.0
    phi0: float = 1.0
    l0: float = 0.0
    lx: float = 0.0
    qx: float = Field(default=1.0, ge=0.0)
    qu: float = Field(default=1.0, ge=0.0)
    wT: float = Field(default=1.0, ge=0.0)
    gamma_weight: float = Field(default=0.0, ge=0.0)
    x0: float = 1.0
    T: float = Field(default=1.0, gt=0.0)
    u_lower: float = -10.0
    u_upper: float = 10.0

    @model_validator(mode="after")
    def _bounds_ordered(self) -> "LqParams":
        if self.u_lower > self.u_upper:
            raise ValueError(f"u_lower {self.u_lower} exceeds u_upper {self.u_upper}")
        return self


class LinearQuadraticBundle(CoefficientBundle):
    """Coefficient maps of the scalar LQ family (n = m = K = M = 1)."""

    def __init__(self, params: LqParams):
        super().__init__(Dimensions(n=1, m=1, K=1, M=1))
        self.params = params

    def _const(self, x: np.ndarray, value: float, *symbols: str) -> np.ndarray:
        return np.full((x.shape[0],) + self._shape(symbols), value)

    def b(self, t, x, u):
        p = self.params
        return p.a * x + p.b_u * u + p.b0

    def b_x(self, t, x, u):
        return self._const(x, self.params.a, "n", "n")

    def b_u(self, t, x, u):
        return self._const(x, self.params.b_u, "n", "K")

    def sigma1(self, t, x, u):
        return self._const(x, self.params.c1, "n")

    def sigma2(self, t, x, u):
        return self._const(x, self.params.c2, "n")

    def g(self, t, x, u):
        return self._const(x, self.params.jump_size, "n", "M")

    def h(self, t, x, u):
        return self.params.h0 + self.params.hx * x[:, 0]

    def h_x(self, t, x, u):
        return self._const(x, self.params.hx, "n")

    def f(self, t, x, y, z1, z2, lam, u):
        return self.params.f0 + self.params.fy * y

    def f_y(self, t, x, y, z1, z2, lam, u):
        return self._const(x, self.params.fy, "m", "m")

    def phi(self, x):
        return self.params.phi0 * x

    def phi_x(self, x):
        return self._const(x, self.params.phi0, "m", "n")

    def l(self, t, x, y, z1, z2, lam, u):  # noqa: E743
        p = self.params
        return (p.l0 + p.lx * x[:, 0]
                + 0.5 * (p.qx * x[:, 0] ** 2 + p.qu * np.sum(u ** 2, axis=1)))

    def l_x(self, t, x, y, z1, z2, lam, u):
        return self.params.lx + self.params.qx * x

    def l_u(self, t, x, y, z1, z2, lam, u):
        return self.params.qu * u

    def Phi(self, x):
        return 0.5 * self.params.wT * x[:, 0] ** 2

    def Phi_x(self, x):
        return self.params.wT * x

    def gamma(self, y):
        return 0.5 * self.params.gamma_weight * y[:, 0] ** 2

    def gamma_y(self, y):
        return self.params.gamma_weight * y


class ConcaveControlBundle(LinearQuadraticBundle):
    """LQ dynamics with running cost l0 + lx x + qx x^2 / 2 - |u|^2: H is concave in u."""

    def l(self, t, x, y, z1, z2, lam, u):  # noqa: E743
        p = self.params
        return p.l0 + p.lx * x[:, 0] + 0.5 * p.qx * x[:, 0] ** 2 - np.sum(u ** 2, axis=1)

    def l_u(self, t, x, y, z1, z2, lam, u):
        return -2.0 * u


def _scalar_problem(name: str, params: LqParams, bundle: CoefficientBundle) -> ProblemSpec:
    return ProblemSpec(
        n=1, m=1, K=1,
        T=params.T,
        x0=(params.x0,),
        mark_space=MarkSpace(marks=("jump",), weights=(params.intensity,)),
        control_set=ControlSet(lower=(params.u_lower,), upper=(params.u_upper,)),
        coefficients=bundle,
        name=name,
        source={"builtin": name, "params": params.model_dump()},
    )


def builtin_lq_problem(params: Optional[LqParams] = None) -> ProblemSpec:
    """Scalar LQ spec; params are validated by LqParams (negative weights rejected)."""
    params = params or LqParams()
    return _scalar_problem("lq", params, LinearQuadraticBundle(params))


def builtin_concave_problem(params: Optional[LqParams] = None) -> ProblemSpec:
    """Counterexample for the sufficient condition; bounded controls keep J finite."""
    params = params or LqParams(u_lower=-1.0, u_upper=1.0)
    return _scalar_problem("lq_concave", params, ConcaveControlBundle(params))


# =============================================================================
# REGISTRY
# =============================================================================

ProblemFactory = Callable[[Dict[str, Any]], ProblemSpec]


class ProblemRegistry:
    """Name -> factory lookup for builtin problems."""

    def __init__(self):
        self._factories: Dict[str, ProblemFactory] = {}

    def register(self, name: str, factory: ProblemFactory) -> None:
        if name in self._factories:
            raise ConfigError(f"builtin problem '{name}' already registered")
        self._factories[name] = factory
        logger.debug(f"Registered builtin problem: {name}")

    def names(self) -> List[str]:
        return sorted(self._factories)

    def build(self, name: str, params: Optional[Dict[str, Any]] = None) -> ProblemSpec:
        if name not in self._factories:
            raise ConfigError(
                f"unknown builtin problem '{name}' (available: {', '.join(self.names())})",
                location="problem.builtin",
            )
        return self._factories[name](dict(params or {}))


_registry: Optional[ProblemRegistry] = None


def get_problem_registry() -> ProblemRegistry:
    global _registry
    if _registry is None:
        _registry = ProblemRegistry()
        _registry.register("lq", lambda params: builtin_lq_problem(LqParams(**params)))
        _registry.register("lq_concave",
                           lambda params: builtin_concave_problem(LqParams(**params) if params else None))
    return _registry


def problem_to_config(spec: ProblemSpec) -> Dict[str, Any]:
    """Inverse of ProblemRegistry.build for registry-built specs."""
    if spec.source is None:
        raise ConfigError(f"problem '{spec.name}' was built programmatically and has no config form")
    return dict(spec.source)
