"""
pomp-core - Problem Model
=========================

Defines a partially observed forward-backward control problem with jumps:

- MarkSpace: finite jump marks with intensities nu_i
- ControlSet: box constraint U with exact projection
- CoefficientBundle: vectorised coefficient evaluators and their first derivatives
- ProblemSpec: dimensions, horizon, initial state and the pieces above
- validate_spec: sample-based checks of shapes, derivatives and growth

Array conventions (P = batch of sample points or paths):
    x (P, n)   u (P, K)   y, z1, z2 (P, m)   lam (P, m, M)   t: float
A derivative of an evaluator with value shape V in an argument of shape A
has shape (P, *V, *A).
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Tuple

import numpy as np

from src.data.exceptions import (
    DimensionMismatchError,
    NonFiniteOutputError,
    ProblemDefinitionError,
)
from src.observability.tracing import trace_operation

logger = logging.getLogger("pomp.problem")


# =============================================================================
# ENUMS & DATA STRUCTURES
# =============================================================================

@dataclass(frozen=True)
class Dimensions:
    """State n, backward m, control K and mark count M."""
    n: int
    m: int
    K: int
    M: int

    def __post_init__(self):
        if min(self.n, self.m, self.K) < 1 or self.M < 0:
            raise ProblemDefinitionError(f"invalid dimensions {self}")


@dataclass(frozen=True)
class MarkSpace:
    """Finite mark set e_1..e_M with intensity weights nu_i >= 0."""
    marks: Tuple[str, ...] = ()
    weights: Tuple[float, ...] = ()

    def __post_init__(self):
        if len(self.marks) != len(self.weights):
            raise ProblemDefinitionError(
                f"{len(self.marks)} marks but {len(self.weights)} weights"
            )
        for mark, weight in zip(self.marks, self.weights):
            if not np.isfinite(weight) or weight < 0:
                raise ProblemDefinitionError(f"mark '{mark}' has invalid intensity {weight}")

    @property
    def M(self) -> int:
        return len(self.marks)

    @property
    def nu(self) -> np.ndarray:
        return np.asarray(self.weights, dtype=float)

    @property
    def total_mass(self) -> float:
        return float(sum(self.weights))

    def to_dict(self) -> Dict[str, Any]:
        return {"marks": list(self.marks), "weights": list(self.weights)}


@dataclass(frozen=True)
class ControlSet:
    """Box U = [lower, upper] (components may be infinite)."""
    lower: Tuple[float, ...]
    upper: Tuple[float, ...]

    def __post_init__(self):
        if len(self.lower) != len(self.upper):
            raise ProblemDefinitionError("control bounds have different lengths")
        for lo, hi in zip(self.lower, self.upper):
            if np.isnan(lo) or np.isnan(hi) or lo > hi:
                raise ProblemDefinitionError(f"invalid control bounds [{lo}, {hi}]")

    @classmethod
    def unbounded(cls, K: int) -> "ControlSet":
        return cls(lower=(-np.inf,) * K, upper=(np.inf,) * K)

    @property
    def K(self) -> int:
        return len(self.lower)

    @property
    def is_bounded(self) -> bool:
        return bool(np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper)))

    def project(self, u: np.ndarray) -> np.ndarray:
        """Exact Euclidean projection onto the box."""
        return np.clip(u, np.asarray(self.lower), np.asarray(self.upper))

    def contains(self, u: np.ndarray) -> bool:
        u = np.asarray(u)
        return bool(np.all(u >= np.asarray(self.lower)) and np.all(u <= np.asarray(self.upper)))

    def to_dict(self) -> Dict[str, Any]:
        return {"lower": list(self.lower), "upper": list(self.upper)}


# name -> (arguments, value shape symbols)
EVALUATORS: Dict[str, Tuple[Tuple[str, ...], Tuple[str, ...]]] = {
    "b": (("t", "x", "u"), ("n",)),
    "sigma1": (("t", "x", "u"), ("n",)),
    "sigma2": (("t", "x", "u"), ("n",)),
    "g": (("t", "x", "u"), ("n", "M")),
    "h": (("t", "x", "u"), ()),
    "f": (("t", "x", "y", "z1", "z2", "lam", "u"), ("m",)),
    "phi": (("x",), ("m",)),
    "l": (("t", "x", "y", "z1", "z2", "lam", "u"), ()),
    "Phi": (("x",), ()),
    "gamma": (("y",), ()),
}

ARGUMENT_SHAPES: Dict[str, Tuple[str, ...]] = {
    "x": ("n",),
    "u": ("K",),
    "y": ("m",),
    "z1": ("m",),
    "z2": ("m",),
    "lam": ("m", "M"),
}

# Coefficients whose first derivatives must stay bounded
BOUNDED_DERIVATIVES = ("b", "sigma1", "sigma2", "g", "h", "f", "phi")
BOUNDED_VALUES = ("h", "sigma2")


def differentiable_arguments(name: str) -> Tuple[str, ...]:
    return tuple(a for a in EVALUATORS[name][0] if a != "t")


class CoefficientBundle:
    """
    Coefficient maps of the controlled system and cost, vectorised over a
    leading batch axis.

    Every evaluator defaults to zero so a concrete problem overrides only
    the maps it uses. Derivative evaluators are named ``<map>_<argument>``.
    """

    def __init__(self, dims: Dimensions):
        self.dims = dims

    # --- helpers -----------------------------------------------------------

    def _shape(self, symbols: Tuple[str, ...]) -> Tuple[int, ...]:
        return tuple(getattr(self.dims, s) for s in symbols)

    def _zeros(self, batch: np.ndarray, *symbols: str) -> np.ndarray:
        return np.zeros((batch.shape[0],) + self._shape(symbols))

    def evaluate(self, name: str, point: Mapping[str, Any]) -> np.ndarray:
        args, _ = EVALUATORS[name]
        return getattr(self, name)(*(point[a] for a in args))

    def derivative(self, name: str, wrt: str, point: Mapping[str, Any]) -> np.ndarray:
        args, _ = EVALUATORS[name]
        return getattr(self, f"{name}_{wrt}")(*(point[a] for a in args))

    # --- forward coefficients ----------------------------------------------

    def b(self, t, x, u):
        return self._zeros(x, "n")

    def b_x(self, t, x, u):
        return self._zeros(x, "n", "n")

    def b_u(self, t, x, u):
        return self._zeros(x, "n", "K")

    def sigma1(self, t, x, u):
        return self._zeros(x, "n")

    def sigma1_x(self, t, x, u):
        return self._zeros(x, "n", "n")

    def sigma1_u(self, t, x, u):
        return self._zeros(x, "n", "K")

    def sigma2(self, t, x, u):
        return self._zeros(x, "n")

    def sigma2_x(self, t, x, u):
        return self._zeros(x, "n", "n")

    def sigma2_u(self, t, x, u):
        return self._zeros(x, "n", "K")

    def g(self, t, x, u):
        return self._zeros(x, "n", "M")

    def g_x(self, t, x, u):
        return self._zeros(x, "n", "M", "n")

    def g_u(self, t, x, u):
        return self._zeros(x, "n", "M", "K")

    def h(self, t, x, u):
        return self._zeros(x)

    def h_x(self, t, x, u):
        return self._zeros(x, "n")

    def h_u(self, t, x, u):
        return self._zeros(x, "K")

    # --- backward coefficients ---------------------------------------------

    def f(self, t, x, y, z1, z2, lam, u):
        return self._zeros(x, "m")

    def f_x(self, t, x, y, z1, z2, lam, u):
        return self._zeros(x, "m", "n")

    def f_y(self, t, x, y, z1, z2, lam, u):
        return self._zeros(x, "m", "m")

    def f_z1(self, t, x, y, z1, z2, lam, u):
        return self._zeros(x, "m", "m")

    def f_z2(self, t, x, y, z1, z2, lam, u):
        return self._zeros(x, "m", "m")

    def f_lam(self, t, x, y, z1, z2, lam, u):
        return self._zeros(x, "m", "m", "M")

    def f_u(self, t, x, y, z1, z2, lam, u):
        return self._zeros(x, "m", "K")

    def phi(self, x):
        return self._zeros(x, "m")

    def phi_x(self, x):
        return self._zeros(x, "m", "n")

    # --- cost ----------------------------------------------------------------

    def l(self, t, x, y, z1, z2, lam, u):  # noqa: E743
        return self._zeros(x)

    def l_x(self, t, x, y, z1, z2, lam, u):
        return self._zeros(x, "n")

    def l_y(self, t, x, y, z1, z2, lam, u):
        return self._zeros(x, "m")

    def l_z1(self, t, x, y, z1, z2, lam, u):
        return self._zeros(x, "m")

    def l_z2(self, t, x, y, z1, z2, lam, u):
        return self._zeros(x, "m")

    def l_lam(self, t, x, y, z1, z2, lam, u):
        return self._zeros(x, "m", "M")

    def l_u(self, t, x, y, z1, z2, lam, u):
        return self._zeros(x, "K")

    def Phi(self, x):
        return self._zeros(x)

    def Phi_x(self, x):
        return self._zeros(x, "n")

    def gamma(self, y):
        return self._zeros(y)

    def gamma_y(self, y):
        return self._zeros(y, "m")


@dataclass(frozen=True)
class ProblemSpec:
    """A fully specified control problem."""
    n: int
    m: int
    K: int
    T: float
    x0: Tuple[float, ...]
    mark_space: MarkSpace
    control_set: ControlSet
    coefficients: CoefficientBundle
    name: str = "custom"
    # builtin name + params when the spec came from the registry
    source: Optional[Dict[str, Any]] = field(default=None, compare=False)

    def __post_init__(self):
        if not (self.T > 0 and np.isfinite(self.T)):
            raise ProblemDefinitionError(f"horizon T must be positive, got {self.T}")
        if len(self.x0) != self.n:
            raise ProblemDefinitionError(f"x0 has length {len(self.x0)}, expected n={self.n}")
        if self.control_set.K != self.K:
            raise ProblemDefinitionError(
                f"control set has {self.control_set.K} components, expected K={self.K}"
            )
        expected = Dimensions(self.n, self.m, self.K, self.mark_space.M)
        if self.coefficients.dims != expected:
            raise ProblemDefinitionError(
                f"coefficient bundle dimensions {self.coefficients.dims} != {expected}"
            )

    @property
    def dims(self) -> Dimensions:
        return self.coefficients.dims

    @property
    def M(self) -> int:
        return self.mark_space.M

    @property
    def nu(self) -> np.ndarray:
        return self.mark_space.nu

    def to_dict(self) -> Dict[str, Any]:
        data = {
            "name": self.name,
            "n": self.n,
            "m": self.m,
            "K": self.K,
            "T": self.T,
            "x0": list(self.x0),
            "mark_space": self.mark_space.to_dict(),
            "control_set": self.control_set.to_dict(),
        }
        if self.source is not None:
            data["source"] = self.source
        return data


@dataclass
class ValidationCheck:
    """Outcome of one named validation check."""
    name: str
    passed: bool
    worst_value: float
    point: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "passed": self.passed,
            "worst_value": self.worst_value,
            "point": self.point,
        }


@dataclass
class ValidationReport:
    """All checks run by validate_spec."""
    checks: List[ValidationCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failures(self) -> List[ValidationCheck]:
        return [c for c in self.checks if not c.passed]

    def get(self, name: str) -> ValidationCheck:
        for check in self.checks:
            if check.name == name:
                return check
        raise KeyError(name)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "passed": self.passed,
            "checks": [c.to_dict() for c in self.checks],
        }


# =============================================================================
# VALIDATION
# =============================================================================

@dataclass(frozen=True)
class ValidationSettings:
    """Knobs for validate_spec."""
    box: float = 10.0
    fd_step: float = 1e-5
    rtol: float = 1e-5
    growth_scale: float = 10.0
    growth_tolerance: float = 2.0
    bound: float = 1e6
    time_groups: int = 8


def _sample_points(spec: ProblemSpec, size: int, t: float, rng: np.random.Generator,
                   box: float) -> Dict[str, Any]:
    n, m, K, M = spec.n, spec.m, spec.K, spec.M
    lower = np.asarray(spec.control_set.lower)
    upper = np.asarray(spec.control_set.upper)
    lo_box = np.where(np.isfinite(lower), lower, -box)
    hi_box = np.where(np.isfinite(upper), upper, box)
    u = lo_box + (hi_box - lo_box) * rng.uniform(0.0, 1.0, size=(size, K))
    return {
        "t": t,
        "x": rng.uniform(-box, box, size=(size, n)),
        "u": u,
        "y": rng.uniform(-box, box, size=(size, m)),
        "z1": rng.uniform(-box, box, size=(size, m)),
        "z2": rng.uniform(-box, box, size=(size, m)),
        "lam": rng.uniform(-box, box, size=(size, m, M)),
    }


def _scaled(point: Dict[str, Any], scale: float, control_set: ControlSet) -> Dict[str, Any]:
    scaled = {k: (v * scale if k != "t" else v) for k, v in point.items()}
    scaled["u"] = control_set.project(point["u"] * scale)
    return scaled


def _describe(point: Mapping[str, Any], index: int) -> Dict[str, Any]:
    return {
        k: (float(v) if k == "t" else np.asarray(v)[index].tolist())
        for k, v in point.items()
    }


def _checked(spec: ProblemSpec, label: str, value: np.ndarray, expected: Tuple[int, ...],
             point: Mapping[str, Any]) -> np.ndarray:
    value = np.asarray(value, dtype=float)
    if value.shape != expected:
        raise DimensionMismatchError(label, expected, value.shape)
    if not np.all(np.isfinite(value)):
        bad = int(np.argwhere(~np.isfinite(value.reshape(value.shape[0], -1)))[0][0])
        raise NonFiniteOutputError(label, _describe(point, bad))
    return value


def _value_shape(spec: ProblemSpec, name: str) -> Tuple[int, ...]:
    return spec.coefficients._shape(EVALUATORS[name][1])


def _arg_shape(spec: ProblemSpec, arg: str) -> Tuple[int, ...]:
    return spec.coefficients._shape(ARGUMENT_SHAPES[arg])


def _central_difference(spec: ProblemSpec, name: str, arg: str, point: Dict[str, Any],
                        fd_step: float) -> np.ndarray:
    """Finite-difference Jacobian with shape (P, value_size, arg_size)."""
    bundle = spec.coefficients
    base = np.asarray(point[arg], dtype=float)
    P = base.shape[0]
    flat = base.reshape(P, -1)
    columns = []
    for j in range(flat.shape[1]):
        step = fd_step * np.maximum(1.0, np.abs(flat[:, j]))
        plus, minus = flat.copy(), flat.copy()
        plus[:, j] += step
        minus[:, j] -= step
        v_plus = bundle.evaluate(name, {**point, arg: plus.reshape(base.shape)})
        v_minus = bundle.evaluate(name, {**point, arg: minus.reshape(base.shape)})
        diff = (np.asarray(v_plus) - np.asarray(v_minus)).reshape(P, -1)
        columns.append(diff / (2.0 * step[:, None]))
    if not columns:
        return np.zeros((P, int(np.prod(_value_shape(spec, name), dtype=int)), 0))
    return np.stack(columns, axis=-1)


@trace_operation("validate_spec")
def validate_spec(spec: ProblemSpec, samples: int = 100, seed: int = 0,
                  settings: Optional[ValidationSettings] = None) -> ValidationReport:
    """
    Spot-check a spec against the standing assumptions.

    Dimension mismatches and non-finite outputs raise immediately; derivative
    agreement and growth checks are collected into the report.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    settings = settings or ValidationSettings()
    rng = np.random.default_rng(seed)
    bundle = spec.coefficients

    groups = min(samples, settings.time_groups)
    sizes = [samples // groups + (1 if i < samples % groups else 0) for i in range(groups)]
    times = rng.uniform(0.0, spec.T, size=groups)
    points = [_sample_points(spec, size, float(t), rng, settings.box)
              for size, t in zip(sizes, times)]

    derivative_worst: Dict[str, Tuple[float, Dict[str, Any]]] = {}
    growth_base: Dict[str, float] = {}
    growth_scaled: Dict[str, Tuple[float, Dict[str, Any]]] = {}

    def track_growth(label: str, base: np.ndarray, scaled: np.ndarray, scaled_point) -> None:
        base_sup = float(np.max(np.abs(base))) if base.size else 0.0
        flat = np.abs(scaled.reshape(scaled.shape[0], -1)) if scaled.size else None
        scaled_sup = float(flat.max()) if flat is not None else 0.0
        growth_base[label] = max(growth_base.get(label, 0.0), base_sup)
        if scaled_sup >= growth_scaled.get(label, (-1.0, {}))[0]:
            where = int(np.argmax(flat.max(axis=1))) if flat is not None else 0
            growth_scaled[label] = (scaled_sup, _describe(scaled_point, where))

    for point in points:
        P = point["x"].shape[0]
        scaled_point = _scaled(point, settings.growth_scale, spec.control_set)
        for name in EVALUATORS:
            value_shape = _value_shape(spec, name)
            value = _checked(spec, name, bundle.evaluate(name, point), (P,) + value_shape, point)
            if name in BOUNDED_VALUES:
                track_growth(name, value,
                             _checked(spec, name, bundle.evaluate(name, scaled_point),
                                      (P,) + value_shape, scaled_point),
                             scaled_point)
            for arg in differentiable_arguments(name):
                label = f"{name}_{arg}"
                expected = (P,) + value_shape + _arg_shape(spec, arg)
                analytic = _checked(spec, label, bundle.derivative(name, arg, point),
                                    expected, point)
                numeric = _central_difference(spec, name, arg, point, settings.fd_step)
                a = analytic.reshape(numeric.shape)
                err = np.abs(a - numeric) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(numeric)))
                per_point = err.reshape(P, -1).max(axis=1) if err.size else np.zeros(P)
                worst = int(np.argmax(per_point))
                if per_point[worst] >= derivative_worst.get(label, (-1.0, {}))[0]:
                    derivative_worst[label] = (float(per_point[worst]), _describe(point, worst))
                if name in BOUNDED_DERIVATIVES:
                    scaled_value = _checked(spec, label,
                                            bundle.derivative(name, arg, scaled_point),
                                            expected, scaled_point)
                    track_growth(label, analytic, scaled_value, scaled_point)

    report = ValidationReport()
    for label, (worst, where) in derivative_worst.items():
        report.checks.append(ValidationCheck(
            name=f"derivative:{label}", passed=worst <= settings.rtol,
            worst_value=worst, point=where if worst > settings.rtol else {},
        ))
    for label, (scaled_sup, where) in growth_scaled.items():
        base_sup = growth_base[label]
        ratio = scaled_sup / max(base_sup, 1e-12) if scaled_sup > 1e-12 else 1.0
        passed = ratio <= settings.growth_tolerance and scaled_sup <= settings.bound
        report.checks.append(ValidationCheck(
            name=f"bounded:{label}", passed=passed,
            worst_value=scaled_sup, point={} if passed else where,
        ))

    for failure in report.failures:
        logger.warning(
            f"Validation check failed: {failure.name}",
            extra={"event_type": "validation_failure", "check": failure.name,
                   "worst_value": failure.worst_value},
        )
    logger.info(
        "Spec validated",
        extra={"event_type": "validation", "problem": spec.name,
               "checks": len(report.checks), "failures": len(report.failures)},
    )
    return report
