from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, computed_field


class Estimate(BaseModel):
    """A Monte-Carlo estimate with its standard error."""
    model_config = ConfigDict(frozen=True)

    value: float = Field(..., description="Sample mean")
    stderr: float = Field(0.0, ge=0.0, description="Standard error of the mean")


class SufficientCertificate(BaseModel):
    """Outcome of the convexity and conditional-minimization checks."""
    model_config = ConfigDict(frozen=True)

    convexity_pass: bool
    convexity_failures: List[str] = Field(default_factory=list,
                                          description="Checks whose midpoint inequality failed")
    minimization_residual: float = Field(..., ge=0.0)
    tol: float = Field(..., ge=0.0)

    @computed_field  # type: ignore[misc]
    @property
    def passed(self) -> bool:
        return self.convexity_pass and self.minimization_residual <= self.tol


class OptimalityReport(BaseModel):
    """Cost, first-order and (when applicable) second-order diagnostics of a policy."""
    model_config = ConfigDict(frozen=True)

    cost: Estimate
    directional_derivative: Optional[Estimate] = Field(
        None, description="Derivative along the projected-gradient step")
    necessary_residual: float = Field(..., ge=0.0)
    conditional_residual: Optional[float] = Field(
        None, ge=0.0, description="Residual against E[rho H_u | Y] / E[rho | Y] instead of the class gradient")
    sufficient_certificate: Optional[SufficientCertificate] = None
    adjoint_sweeps: int = Field(0, ge=0)
    paths: int = Field(..., ge=1)
    steps: int = Field(..., ge=1)

    def to_record(self) -> Dict[str, Any]:
        """Flat key/value form for JSON artifacts."""
        record: Dict[str, Any] = {
            "cost": self.cost.value,
            "cost_stderr": self.cost.stderr,
            "necessary_residual": self.necessary_residual,
            "adjoint_sweeps": self.adjoint_sweeps,
            "paths": self.paths,
            "steps": self.steps,
        }
        if self.conditional_residual is not None:
            record["conditional_residual"] = self.conditional_residual
        if self.directional_derivative is not None:
            record["directional_derivative"] = self.directional_derivative.value
            record["directional_derivative_stderr"] = self.directional_derivative.stderr
        if self.sufficient_certificate is not None:
            cert = self.sufficient_certificate
            record["sufficient_convexity_pass"] = cert.convexity_pass
            record["sufficient_convexity_failures"] = ",".join(cert.convexity_failures)
            record["sufficient_minimization_residual"] = cert.minimization_residual
            record["sufficient_passed"] = cert.passed
        return record


class DifferenceFormulaReport(BaseModel):
    """Direct cost difference against its adjoint expansion on common noise."""
    model_config = ConfigDict(frozen=True)

    lhs: float
    rhs: float
    gap: float
    stderr: float = Field(..., ge=0.0)
    terms: Dict[str, float] = Field(default_factory=dict,
                                    description="Mean of each expansion term")

    def within(self, sigmas: float, allowance: float = 0.0) -> bool:
        return abs(self.gap) <= sigmas * self.stderr + allowance


class PerturbationOrderReport(BaseModel):
    """Gap moments of convex perturbations and their fitted log-log slopes."""
    model_config = ConfigDict(frozen=True)

    eps: List[float]
    gaps: Dict[str, List[float]]
    slopes: Dict[str, Optional[float]] = Field(
        ..., description="None when every gap is exactly zero")
    expected: Dict[str, float] = Field(default_factory=lambda: {"x": 4.0, "y": 4.0, "rho": 2.0})

    @property
    def exact_zero(self) -> Dict[str, bool]:
        return {name: slope is None for name, slope in self.slopes.items()}

    def within(self, band: float) -> bool:
        """Every fitted slope within `band` of its expected order (exact zeros pass)."""
        return all(slope is None or abs(slope - self.expected[name]) <= band
                   for name, slope in self.slopes.items())
