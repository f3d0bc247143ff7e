"""
Experiment configuration.

One JSON document per experiment. Every section rejects unknown keys, and
every tolerance used by a check lives in `tolerances` with a documented
default, so a run is fully described by its config plus the seed.
"""

import hashlib
import json
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from src.core.bsde import PicardSettings
from src.core.forward import ControlPolicy
from src.core.noise import make_grid
from src.core.optimizer import OptimizerConfig
from src.core.regression import BasisSpec
from src.data.builtin_problems import get_problem_registry
from src.data.exceptions import ConfigError, GridError, ProblemDefinitionError
from src.data.problem_model import ProblemSpec

STRICT = ConfigDict(extra="forbid")


class ProblemSection(BaseModel):
    """A builtin problem by name, or a JSON file holding {"builtin": ..., "params": ...}."""
    model_config = STRICT

    builtin: Optional[str] = None
    params: Dict[str, Any] = Field(default_factory=dict)
    spec_file: Optional[str] = None

    @model_validator(mode="after")
    def _one_source(self) -> "ProblemSection":
        if (self.builtin is None) == (self.spec_file is None):
            raise ValueError("set exactly one of 'builtin' or 'spec_file'")
        return self


class GridSection(BaseModel):
    """T None means the problem's own horizon."""
    model_config = STRICT

    T: Optional[float] = None
    N: int = 100

    @model_validator(mode="after")
    def _valid_grid(self) -> "GridSection":
        try:
            make_grid(1.0 if self.T is None else self.T, self.N)
        except GridError as e:
            raise ValueError(str(e)) from e
        return self


class MonteCarloSection(BaseModel):
    model_config = STRICT

    paths: int = Field(100_000, ge=2)
    seed: int = Field(42, ge=0)


class BasisSection(BaseModel):
    model_config = STRICT

    degree: int = Field(2, ge=1)
    ridge: float = Field(0.0, ge=0.0)
    variables: Optional[List[Literal["x", "Y", "Y_avg", "k"]]] = None

    def to_spec(self) -> BasisSpec:
        variables = tuple(self.variables) if self.variables is not None else None
        return BasisSpec(degree=self.degree, ridge=self.ridge, variables=variables)


class PicardSection(BaseModel):
    model_config = STRICT

    max_sweeps: int = Field(20, ge=1)
    tol: float = Field(1e-8, gt=0.0)

    def to_settings(self) -> PicardSettings:
        return PicardSettings(max_sweeps=self.max_sweeps, tol=self.tol)


class PolicySection(BaseModel):
    """Initial policy for optimize/simulate, or the policy verify-mp certifies."""
    model_config = STRICT

    kind: Literal["zeros", "affine", "file"] = "zeros"
    bias: float = 0.0
    gain: float = 0.0
    average_gain: Optional[float] = None
    blocks: Optional[int] = Field(None, ge=1)
    use_running_average: bool = False
    file: Optional[str] = None

    @model_validator(mode="after")
    def _file_given(self) -> "PolicySection":
        if self.kind == "file" and not self.file:
            raise ValueError("policy kind 'file' needs 'file'")
        return self


class ChecksSection(BaseModel):
    """Sizes of the diagnostic checks."""
    model_config = STRICT

    hamiltonian_points: int = Field(100, ge=1)
    fd_step: float = Field(1e-5, gt=0.0)
    gradient_directions: int = Field(5, ge=1)
    direction_scale: float = Field(0.5, gt=0.0)
    gradient_eps: float = Field(1e-3, gt=0.0)
    difference_pairs: int = Field(3, ge=1)
    eps_list: List[float] = Field(default_factory=lambda: [0.1, 0.03, 0.01, 0.003])
    convexity_samples: int = Field(100, ge=1)
    minimization_grid: int = Field(21, ge=2)
    export_paths: int = Field(20, ge=0)
    moment_paths: int = Field(10_000, ge=2)

    @field_validator("eps_list")
    @classmethod
    def _eps_positive(cls, value: List[float]) -> List[float]:
        if len(set(value)) < 3 or any(e <= 0 for e in value):
            raise ValueError("eps_list needs at least three distinct positive values")
        return value


class BenchSection(BaseModel):
    """lq-bench settings beyond the shared Monte-Carlo section."""
    model_config = STRICT

    martingale_h0: float = 0.5
    oracle_points: int = Field(9, ge=3)
    oracle_zoom_rounds: int = Field(1, ge=0)
    bias_range: Tuple[float, float] = (-2.0, 2.0)
    gain_range: Tuple[float, float] = (-2.0, 2.0)
    compare_workers: Tuple[int, int] = (1, 4)
    bsde_oracle_paths: int = Field(20_000, ge=2)
    criteria: Optional[List[int]] = Field(None, description="Subset of criteria 1..10 to run")

    @field_validator("criteria")
    @classmethod
    def _known_criteria(cls, value: Optional[List[int]]) -> Optional[List[int]]:
        if value is not None and any(c < 1 or c > 10 for c in value):
            raise ValueError("criteria are numbered 1..10")
        return value


class TolerancesSection(BaseModel):
    """Pass/fail thresholds; sigmas multiply the Monte-Carlo standard error."""
    model_config = STRICT

    martingale_sigmas: float = Field(3.0, gt=0.0)
    hamiltonian_fd: float = Field(1e-6, gt=0.0)
    gradient_rel: float = Field(0.02, gt=0.0)
    gradient_sigmas: float = Field(3.0, gt=0.0)
    bsde_sigmas: float = Field(3.0, gt=0.0)
    bsde_exact: float = Field(1e-8, gt=0.0)
    adjoint_sigmas: float = Field(3.0, gt=0.0)
    adjoint_dt_factor: float = Field(2.0, ge=0.0)
    difference_sigmas: float = Field(3.0, gt=0.0)
    difference_allowance: float = Field(1e-3, ge=0.0,
                                        description="Absolute discretisation allowance")
    slope_band: float = Field(0.5, gt=0.0)
    optimizer_rel: float = Field(0.02, gt=0.0)
    optimizer_sigmas: float = Field(3.0, gt=0.0)
    necessary_residual: float = Field(1e-3, gt=0.0)
    sufficient_residual: float = Field(1e-3, gt=0.0)


class OutputsSection(BaseModel):
    model_config = STRICT

    directory: str = "results"
    formats: List[Literal["csv", "json"]] = Field(default_factory=lambda: ["csv", "json"])


class ExperimentConfig(BaseModel):
    model_config = STRICT

    problem: ProblemSection
    grid: GridSection = Field(default_factory=GridSection)
    monte_carlo: MonteCarloSection = Field(default_factory=MonteCarloSection)
    basis: BasisSection = Field(default_factory=BasisSection)
    picard: PicardSection = Field(default_factory=PicardSection)
    policy: PolicySection = Field(default_factory=PolicySection)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    checks: ChecksSection = Field(default_factory=ChecksSection)
    bench: BenchSection = Field(default_factory=BenchSection)
    tolerances: TolerancesSection = Field(default_factory=TolerancesSection)
    outputs: OutputsSection = Field(default_factory=OutputsSection)

    @model_validator(mode="after")
    def _builtin_exists(self) -> "ExperimentConfig":
        name = self.problem.builtin
        if name is not None and name not in get_problem_registry().names():
            raise ValueError(f"unknown builtin problem '{name}'")
        return self

    def with_overrides(self, seed: Optional[int] = None, paths: Optional[int] = None,
                       output_dir: Optional[str] = None) -> "ExperimentConfig":
        """Copy with CLI overrides applied and re-validated."""
        data = self.model_dump()
        if seed is not None:
            data["monte_carlo"]["seed"] = seed
        if paths is not None:
            data["monte_carlo"]["paths"] = paths
        if output_dir is not None:
            data["outputs"]["directory"] = output_dir
        return validate_config(data)

    def config_hash(self) -> str:
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True,
                               separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    # --- builders ----------------------------------------------------------

    def build_problem(self, base_dir: Optional[Path] = None) -> ProblemSpec:
        section = self.problem
        name, params = section.builtin, section.params
        if section.spec_file is not None:
            path = Path(section.spec_file)
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            try:
                data = json.loads(path.read_text(encoding="utf-8"))
            except (OSError, ValueError) as e:
                raise ConfigError(f"cannot read problem file {path}: {e}",
                                  location="problem.spec_file") from e
            if not isinstance(data, dict) or "builtin" not in data:
                raise ConfigError("problem file must hold {'builtin': name, 'params': {...}}",
                                  location="problem.spec_file")
            name, params = data["builtin"], data.get("params", {})
        try:
            return get_problem_registry().build(name, params)
        except ValidationError as e:
            raise _config_error(e, prefix="problem.params") from e

    def build_grid(self, spec: ProblemSpec):
        T = spec.T if self.grid.T is None else self.grid.T
        if abs(T - spec.T) > 1e-12 * max(1.0, spec.T):
            raise ConfigError(f"grid horizon {T} differs from problem horizon {spec.T}",
                              location="grid.T")
        return make_grid(T, self.grid.N)

    def build_policy(self, spec: ProblemSpec, steps: int,
                     base_dir: Optional[Path] = None) -> ControlPolicy:
        section = self.policy
        if section.blocks is not None and section.blocks > steps:
            raise ConfigError(f"{section.blocks} blocks exceed {steps} steps",
                              location="policy.blocks")
        if section.kind == "zeros":
            return ControlPolicy.zeros(spec.control_set, steps, section.blocks,
                                       section.use_running_average)
        if section.kind == "affine":
            average_gain = section.average_gain
            if section.use_running_average and average_gain is None:
                average_gain = 0.0
            return ControlPolicy.affine(spec.control_set, steps, section.bias, section.gain,
                                        average_gain, section.blocks)
        path = Path(section.file)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
            policy = ControlPolicy.from_dict(data.get("policy", data), spec.control_set)
            if policy.steps != steps:
                policy = policy.resampled(steps)
        except (OSError, ValueError, KeyError, ProblemDefinitionError) as e:
            raise ConfigError(f"cannot load policy from {path}: {e}", location="policy.file") from e
        return policy


def _config_error(error: ValidationError, prefix: str = "") -> ConfigError:
    first = error.errors()[0]
    location = ".".join(str(part) for part in first["loc"])
    if prefix:
        location = f"{prefix}.{location}" if location else prefix
    message = first["msg"]
    if first["type"] == "extra_forbidden":
        message = f"unknown key '{first['loc'][-1]}'"
    elif first["type"] == "missing":
        message = f"missing required key '{first['loc'][-1]}'"
    return ConfigError(message, location=location)


def validate_config(data: Any) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise _config_error(e) from e


def parse_config(path: Union[str, Path]) -> ExperimentConfig:
    """Read and validate an experiment config; every failure is a ConfigError."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}", location="--config")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except ValueError as e:
        raise ConfigError(f"invalid JSON: {e}", location=str(path)) from e
    return validate_config(data)
