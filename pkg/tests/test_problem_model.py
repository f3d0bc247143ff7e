"""
Problem model - unit tests
Spec construction, sample-based validation and the builtin problem registry.
"""

import numpy as np
import pytest
from pydantic import ValidationError

from src.data.builtin_problems import (
    LinearQuadraticBundle,
    LqParams,
    ProblemRegistry,
    builtin_concave_problem,
    builtin_lq_problem,
    get_problem_registry,
    problem_to_config,
)
from src.data.exceptions import ConfigError, DimensionMismatchError, ProblemDefinitionError
from src.data.problem_model import ControlSet, MarkSpace, ProblemSpec, validate_spec

# ============================================================================
# FIXTURES
# ============================================================================


class WideDriftBundle(LinearQuadraticBundle):
    """b returns an (n+1)-vector."""

    def b(self, t, x, u):
        return np.zeros((x.shape[0], 2))


def _spec_with(bundle, params=None):
    params = params or LqParams()
    return ProblemSpec(
        n=1, m=1, K=1, T=params.T, x0=(params.x0,),
        mark_space=MarkSpace(("jump",), (params.intensity,)),
        control_set=ControlSet((params.u_lower,), (params.u_upper,)),
        coefficients=bundle,
    )


# ============================================================================
# BUILDING BLOCKS
# ============================================================================

def test_mark_space_rejects_negative_intensity():
    with pytest.raises(ProblemDefinitionError):
        MarkSpace(marks=("a",), weights=(-1.0,))


def test_mark_space_without_marks():
    marks = MarkSpace()
    assert marks.M == 0
    assert marks.total_mass == 0.0


def test_control_set_projection():
    box = ControlSet(lower=(-1.0,), upper=(1.0,))
    assert box.project(np.array([[2.0], [-3.0], [0.4]])).ravel().tolist() == [1.0, -1.0, 0.4]
    assert box.is_bounded
    assert not ControlSet.unbounded(2).is_bounded


def test_control_set_rejects_reversed_bounds():
    with pytest.raises(ProblemDefinitionError):
        ControlSet(lower=(1.0,), upper=(0.0,))


def test_spec_rejects_wrong_initial_state_length():
    params = LqParams()
    with pytest.raises(ProblemDefinitionError, match="x0"):
        ProblemSpec(n=1, m=1, K=1, T=1.0, x0=(0.0, 1.0),
                    mark_space=MarkSpace(("jump",), (1.0,)),
                    control_set=ControlSet((-1.0,), (1.0,)),
                    coefficients=LinearQuadraticBundle(params))


# ============================================================================
# VALIDATION
# ============================================================================

def test_validate_lq_spec_passes(lq_spec):
    report = validate_spec(lq_spec, samples=100, seed=0)
    assert report.passed, [c.to_dict() for c in report.failures]
    assert any(c.name == "derivative:l_u" for c in report.checks)


def test_validate_reports_wrong_drift_shape():
    spec = _spec_with(WideDriftBundle(LqParams()))
    with pytest.raises(DimensionMismatchError) as exc_info:
        validate_spec(spec, samples=10)
    assert exc_info.value.evaluator == "b"


def test_validate_flags_state_dependent_observation_drift(lq_variant):
    report = validate_spec(lq_variant(hx=1.0), samples=100, seed=1)
    check = report.get("bounded:h")
    assert not check.passed
    assert check.point  # offending point is reported
    assert not report.passed


def test_validate_requires_samples(lq_spec):
    with pytest.raises(ValueError):
        validate_spec(lq_spec, samples=0)


# ============================================================================
# BUILTINS & REGISTRY
# ============================================================================

def test_lq_params_reject_negative_weights():
    with pytest.raises(ValidationError):
        LqParams(qx=-1.0)
    with pytest.raises(ValidationError):
        LqParams(u_lower=2.0, u_upper=1.0)


def test_builtin_lq_dimensions(lq_spec):
    assert (lq_spec.n, lq_spec.m, lq_spec.K, lq_spec.M) == (1, 1, 1, 1)
    assert lq_spec.source["builtin"] == "lq"


def test_concave_problem_has_bounded_controls():
    spec = builtin_concave_problem()
    assert spec.control_set.is_bounded
    u = np.array([[0.5]])
    x = np.zeros((1, 1))
    assert spec.coefficients.l_u(0.0, x, None, None, None, None, u)[0, 0] == pytest.approx(-1.0)


def test_registry_builds_by_name():
    registry = get_problem_registry()
    assert {"lq", "lq_concave"} <= set(registry.names())
    spec = registry.build("lq", {"a": -2.0})
    assert spec.coefficients.params.a == -2.0


def test_registry_unknown_name():
    with pytest.raises(ConfigError, match="available"):
        get_problem_registry().build("nope")


def test_registry_rejects_duplicate_registration():
    registry = ProblemRegistry()
    registry.register("custom", lambda params: builtin_lq_problem())
    with pytest.raises(ConfigError):
        registry.register("custom", lambda params: builtin_lq_problem())


def test_problem_to_config_rebuilds_same_parameters(lq_variant):
    spec = lq_variant(qx=2.0, x0=0.5)
    config = problem_to_config(spec)
    rebuilt = get_problem_registry().build(config["builtin"], config["params"])
    assert rebuilt.coefficients.params == spec.coefficients.params


def test_problem_to_config_needs_a_source():
    spec = _spec_with(LinearQuadraticBundle(LqParams()))
    with pytest.raises(ConfigError):
        problem_to_config(spec)
