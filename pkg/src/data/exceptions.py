"""
pomp-core - Error hierarchy

Every failure raised by the library derives from PompError so callers
(the CLI in particular) can map a whole family to one exit status.
"""

from typing import Any, Dict, List, Optional


class PompError(Exception):
    """Base exception for pomp-core"""
    pass


# =============================================================================
# PROBLEM DEFINITION
# =============================================================================

class ProblemDefinitionError(PompError):
    """Problem spec is malformed"""
    pass


class DimensionMismatchError(ProblemDefinitionError):
    """An evaluator returned an array of the wrong shape"""

    def __init__(self, evaluator: str, expected: tuple, actual: tuple):
        self.evaluator = evaluator
        self.expected = expected
        self.actual = actual
        super().__init__(
            f"evaluator '{evaluator}' returned shape {actual}, expected {expected}"
        )


class NonFiniteOutputError(ProblemDefinitionError):
    """An evaluator produced NaN or inf"""

    def __init__(self, evaluator: str, point: Optional[Dict[str, Any]] = None):
        self.evaluator = evaluator
        self.point = point or {}
        super().__init__(f"evaluator '{evaluator}' returned non-finite values at {self.point}")


class StructuralConditionError(ProblemDefinitionError):
    """Spec falls outside the structural case a check requires"""

    def __init__(self, restriction: str, detail: str = ""):
        self.restriction = restriction
        message = f"structural restriction violated: {restriction}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


# =============================================================================
# NUMERICS
# =============================================================================

class GridError(PompError):
    """Invalid time grid"""
    pass


class NoiseFormatError(PompError):
    """Noise dump has an unexpected header"""
    pass


class ForwardSimulationError(PompError):
    """Forward state blew up"""

    def __init__(self, path: int, step: int, quantity: str = "x"):
        self.path = path
        self.step = step
        self.quantity = quantity
        super().__init__(f"non-finite {quantity} on path {path} at step {step}")


class RegressionError(PompError):
    """Least-squares conditional expectation could not be formed"""
    pass


class AdjointConvergenceError(PompError):
    """Picard sweeps did not reach tolerance"""

    def __init__(self, residuals: List[float], tol: float):
        self.residuals = list(residuals)
        self.tol = tol
        last = residuals[-1] if residuals else float("nan")
        super().__init__(
            f"adjoint Picard iteration stalled after {len(residuals)} sweeps "
            f"(last residual {last:.3e}, tol {tol:.1e})"
        )


class ChangeOfMeasureError(PompError):
    """Bayes-ratio denominator fell below the floor too often"""
    pass


# =============================================================================
# CONFIGURATION
# =============================================================================

class ConfigError(PompError):
    """Experiment config is invalid"""

    def __init__(self, message: str, location: str = ""):
        self.location = location
        super().__init__(f"{location}: {message}" if location else message)
