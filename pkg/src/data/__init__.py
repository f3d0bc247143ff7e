"""
pomp-core - Problem definitions
"""

from src.data.builtin_problems import (
    LinearQuadraticBundle,
    LqParams,
    builtin_lq_problem,
    get_problem_registry,
)
from src.data.problem_model import (
    CoefficientBundle,
    ControlSet,
    Dimensions,
    MarkSpace,
    ProblemSpec,
    ValidationReport,
    validate_spec,
)

__all__ = [
    "CoefficientBundle",
    "ControlSet",
    "Dimensions",
    "LinearQuadraticBundle",
    "LqParams",
    "MarkSpace",
    "ProblemSpec",
    "ValidationReport",
    "builtin_lq_problem",
    "get_problem_registry",
    "validate_spec",
]
