"""
Control gradient - unit tests
Directional derivatives, conditional projection, stationarity residuals and
the difference, perturbation and sufficient-condition checks.
"""

import numpy as np
import pytest

from src.core.forward import ControlPolicy
from src.core.gradient import (
    check_structural_case,
    compute_gradient_field,
    conditional_projection,
    control_offsets,
    convexity_failures,
    difference_formula_check,
    directional_derivative,
    estimate_cost,
    finite_difference_derivative,
    is_structural_case,
    necessary_residual,
    necessary_residual_from_field,
    optimality_report,
    perturbation_order_check,
    run_policy,
    sufficient_check,
)
from src.core.noise import sample_noise
from src.data.builtin_problems import LinearQuadraticBundle, LqParams, builtin_concave_problem
from src.data.exceptions import ChangeOfMeasureError, StructuralConditionError
from src.data.problem_model import ControlSet, MarkSpace, ProblemSpec

# ============================================================================
# FIXTURES
# ============================================================================


class QuadraticCouplingBundle(LinearQuadraticBundle):
    def phi(self, x):
        return x ** 2

    def phi_x(self, x):
        return 2.0 * x[:, :, None]


class StateObservationNoiseBundle(LinearQuadraticBundle):
    """LQ with sigma2(x) = 0.4 + 0.3 tanh(x)."""

    def sigma2(self, t, x, u):
        return 0.4 + 0.3 * np.tanh(x)

    def sigma2_x(self, t, x, u):
        return (0.3 / np.cosh(x) ** 2)[:, :, None]


def _lq_with_bundle(bundle_cls, **updates):
    params = LqParams(**updates)
    return ProblemSpec(n=1, m=1, K=1, T=params.T, x0=(params.x0,),
                       mark_space=MarkSpace(("jump",), (params.intensity,)),
                       control_set=ControlSet((params.u_lower,), (params.u_upper,)),
                       coefficients=bundle_cls(params))


def _constant(spec, grid, value):
    return ControlPolicy.affine(spec.control_set, grid.N, bias=value, gain=0.0)


@pytest.fixture
def frozen_noise(frozen_spec, grid):
    return sample_noise(grid, frozen_spec.mark_space, 300, seed=11)


# ============================================================================
# COST & DIRECTIONAL DERIVATIVE
# ============================================================================

def test_frozen_cost_is_quadratic_in_the_control(frozen_spec, grid, frozen_noise, basis):
    cost = estimate_cost(frozen_spec, _constant(frozen_spec, grid, 0.3), frozen_noise, grid, basis)
    assert cost.value == pytest.approx(0.045, abs=1e-12)


def test_zero_direction_has_zero_derivative(lq_spec, grid, small_noise, basis, picard,
                                            affine_policy):
    estimate = directional_derivative(lq_spec, affine_policy, affine_policy, small_noise, grid,
                                      basis, picard)
    assert estimate.value == 0.0
    assert estimate.stderr == 0.0


def test_frozen_derivative_is_control_times_horizon(frozen_spec, grid, frozen_noise, basis,
                                                    picard):
    base = _constant(frozen_spec, grid, 0.3)
    shifted = _constant(frozen_spec, grid, 1.3)
    adjoint = directional_derivative(frozen_spec, base, shifted, frozen_noise, grid, basis, picard)
    fd = finite_difference_derivative(frozen_spec, base, shifted, frozen_noise, grid, basis)
    assert adjoint.value == pytest.approx(0.3 * grid.T, abs=1e-12)
    assert fd.value == pytest.approx(0.3 * grid.T, abs=1e-8)


def test_adjoint_derivative_agrees_with_finite_difference(lq_spec, grid, small_noise, basis,
                                                          picard, affine_policy):
    direction = ControlPolicy.affine(lq_spec.control_set, grid.N, bias=-0.3, gain=0.2)
    adjoint = directional_derivative(lq_spec, affine_policy, direction, small_noise, grid, basis,
                                     picard)
    fd = finite_difference_derivative(lq_spec, affine_policy, direction, small_noise, grid, basis)
    combined = np.hypot(adjoint.stderr, fd.stderr)
    assert abs(adjoint.value - fd.value) <= max(0.1 * abs(fd.value), 4.0 * combined)


@pytest.mark.parametrize("bundle_cls, updates", [
    (LinearQuadraticBundle, {"hx": 0.8}),
    (LinearQuadraticBundle, {"fy": 0.7, "gamma_weight": 1.0, "f0": 0.3}),
    (LinearQuadraticBundle, {"hx": 0.8, "fy": 0.7, "gamma_weight": 1.0, "f0": 0.3}),
    (StateObservationNoiseBundle, {"hx": 0.8}),
], ids=["observed_state", "coupled_backward", "combined", "state_observation_noise"])
def test_adjoint_derivative_with_live_couplings(grid, basis, picard, bundle_cls, updates):
    spec = _lq_with_bundle(bundle_cls, **updates)
    noise = sample_noise(grid, spec.mark_space, 20_000, seed=13)
    base = ControlPolicy.affine(spec.control_set, grid.N, bias=0.2, gain=-0.4)
    direction = ControlPolicy.affine(spec.control_set, grid.N, bias=-0.3, gain=0.2)
    adjoint = directional_derivative(spec, base, direction, noise, grid, basis, picard)
    fd = finite_difference_derivative(spec, base, direction, noise, grid, basis)
    assert abs(adjoint.value - fd.value) <= 4.0 * np.hypot(adjoint.stderr, fd.stderr)


# ============================================================================
# CONDITIONAL PROJECTION
# ============================================================================

def test_projection_keeps_functions_of_the_features(rng):
    Y = rng.normal(size=(400, 3))
    grad = (1.0 + 2.0 * Y - Y ** 2)[:, :, None]
    projection = conditional_projection(grad, np.ones((400, 3)), Y[:, :, None])
    assert np.allclose(projection.values, grad)
    assert projection.floored_fraction == 0.0


def test_constant_density_cancels(rng):
    Y = rng.normal(size=(400, 2))
    noise = rng.normal(size=(400, 2))
    grad = (3.0 + Y + noise)[:, :, None]
    plain = conditional_projection(grad, np.ones((400, 2)), Y[:, :, None])
    weighted = conditional_projection(grad, np.full((400, 2), 2.5), Y[:, :, None])
    assert np.allclose(plain.values, weighted.values)


def test_vanishing_density_is_an_error(rng):
    Y = rng.normal(size=(100, 1))
    with pytest.raises(ChangeOfMeasureError):
        conditional_projection(np.ones((100, 1, 1)), np.full((100, 1), 1e-12), Y[:, :, None])


# ============================================================================
# NECESSARY CONDITION
# ============================================================================

def test_residual_from_field_respects_the_box():
    box = ControlSet((-1.0,), (1.0,))
    u = np.array([[[0.0], [-1.0]]])
    G = np.ones_like(u)
    assert necessary_residual_from_field(u[:, :1], G[:, :1], box) == 1.0
    assert necessary_residual_from_field(u[:, 1:], G[:, 1:], box) == 0.0
    assert necessary_residual_from_field(np.zeros((0, 0, 1)), np.zeros((0, 0, 1)), box) == 0.0


def test_frozen_residual_equals_the_control(frozen_spec, grid, frozen_noise, basis, picard,
                                            zero_policy):
    assert necessary_residual(frozen_spec, zero_policy, frozen_noise, grid, basis, picard) == 0.0
    constant = _constant(frozen_spec, grid, 0.3)
    residual = necessary_residual(frozen_spec, constant, frozen_noise, grid, basis, picard)
    assert residual == pytest.approx(0.3, abs=1e-9)


def test_conditional_residual_differs_from_the_class_residual(lq_spec, grid, small_noise, basis,
                                                             picard):
    policy = ControlPolicy.zeros(lq_spec.control_set, grid.N, blocks=2)
    ev = run_policy(lq_spec, policy, small_noise, grid, basis, picard)
    in_class = necessary_residual(lq_spec, policy, small_noise, grid, basis, picard,
                                  evaluation=ev)
    conditional = necessary_residual(lq_spec, policy, small_noise, grid, basis, picard,
                                     evaluation=ev, against="conditional")
    # two blocks pool five steps each; the conditional gradient moves with every step
    assert in_class > 0 and conditional > 0
    assert abs(in_class - conditional) > 1e-6
    report = optimality_report(lq_spec, policy, small_noise, grid, basis, picard,
                               convexity_samples=10, minimization_grid=5, evaluation=ev)
    assert report.necessary_residual == pytest.approx(in_class)
    assert report.to_record()["conditional_residual"] == pytest.approx(conditional)


def test_residuals_agree_when_the_class_holds_the_gradient(frozen_spec, grid, frozen_noise,
                                                          basis, picard):
    constant = _constant(frozen_spec, grid, 0.3)
    conditional = necessary_residual(frozen_spec, constant, frozen_noise, grid, basis, picard,
                                     against="conditional")
    assert conditional == pytest.approx(0.3, abs=1e-9)
    with pytest.raises(ValueError):
        necessary_residual(frozen_spec, constant, frozen_noise, grid, basis, picard,
                           against="pointwise")


def test_gradient_field_shapes(lq_spec, grid, small_noise, basis, picard):
    policy = ControlPolicy.zeros(lq_spec.control_set, grid.N, blocks=2, use_running_average=True)
    field = compute_gradient_field(lq_spec, policy, small_noise, grid, basis, picard)
    assert field.Hu.shape == (small_noise.path_count, grid.N, 1)
    assert field.projected.shape == field.Hu.shape
    assert field.direction.shape == (2, 1, 3)
    assert field.class_field.shape == field.Hu.shape


# ============================================================================
# DIFFERENCE FORMULA & PERTURBATION ORDERS
# ============================================================================

def test_difference_formula_is_exact_when_frozen(frozen_spec, grid, frozen_noise, basis, picard):
    u = _constant(frozen_spec, grid, 0.8)
    ubar = _constant(frozen_spec, grid, 0.3)
    report = difference_formula_check(frozen_spec, u, ubar, frozen_noise, grid, basis, picard)
    assert report.lhs == pytest.approx(0.5 * (0.64 - 0.09) * grid.T, abs=1e-12)
    assert report.within(3.0, 1e-9)


def test_difference_formula_on_lq(lq_spec, grid, small_noise, basis, picard, affine_policy):
    u = ControlPolicy.affine(lq_spec.control_set, grid.N, bias=-0.1, gain=0.1)
    report = difference_formula_check(lq_spec, u, affine_policy, small_noise, grid, basis, picard)
    assert {"hamiltonian", "terminal", "cross_R2", "initial"} <= set(report.terms)
    assert report.within(4.0, 0.1 * abs(report.lhs) + 1e-3)


def test_perturbation_orders(lq_spec, grid, small_noise, basis, affine_policy):
    direction = ControlPolicy.affine(lq_spec.control_set, grid.N, bias=1.0, gain=0.5)
    report = perturbation_order_check(lq_spec, affine_policy, direction, small_noise, grid,
                                      [0.1, 0.03, 0.01], basis)
    assert report.slopes["x"] == pytest.approx(4.0, abs=0.05)
    # h does not depend on x, so rho never moves
    assert report.slopes["rho"] is None
    assert report.within(0.5)


def test_perturbation_orders_need_three_eps(lq_spec, grid, small_noise, basis, affine_policy):
    with pytest.raises(ValueError):
        perturbation_order_check(lq_spec, affine_policy, affine_policy, small_noise, grid,
                                 [0.1, 0.01, 0.1], basis)


# ============================================================================
# SUFFICIENT CONDITION
# ============================================================================

def test_structural_case(lq_spec, lq_variant):
    check_structural_case(lq_spec)
    with pytest.raises(StructuralConditionError):
        check_structural_case(lq_variant(hx=0.5))
    assert not is_structural_case(lq_variant(hx=0.5))


def test_nonlinear_coupling_is_not_structural():
    spec = ProblemSpec(n=1, m=1, K=1, T=1.0, x0=(1.0,),
                       mark_space=MarkSpace(("jump",), (1.0,)),
                       control_set=ControlSet((-1.0,), (1.0,)),
                       coefficients=QuadraticCouplingBundle(LqParams()))
    with pytest.raises(StructuralConditionError, match="linear"):
        check_structural_case(spec)


def test_convexity(lq_spec, grid, small_noise, basis, picard, zero_policy):
    ev = run_policy(lq_spec, zero_policy, small_noise, grid, basis, picard)
    assert convexity_failures(lq_spec, ev, samples=20, seed=1) == []

    concave = builtin_concave_problem()
    ev = run_policy(concave, ControlPolicy.zeros(concave.control_set, grid.N), small_noise, grid,
                    basis, picard)
    assert "H:u" in convexity_failures(concave, ev, samples=20, seed=1)


def test_control_offsets_span_the_box():
    box = ControlSet((-1.0,), (1.0,))
    offsets = control_offsets(box, np.zeros((4, 3, 1)), grid_size=5)[:, 0]
    assert 0.0 in offsets
    assert offsets.max() == pytest.approx(2.0)
    assert np.allclose(np.sort(offsets), np.sort(-offsets))
    assert np.min(np.abs(offsets[offsets != 0])) == pytest.approx(2e-4)


def test_sufficient_certificate_at_the_frozen_optimum(frozen_spec, grid, frozen_noise, basis,
                                                      picard, zero_policy):
    cert = sufficient_check(frozen_spec, zero_policy, frozen_noise, grid, basis,
                            convexity_samples=20, picard=picard, tol=1e-9)
    assert cert.convexity_pass
    assert cert.minimization_residual == 0.0
    assert cert.passed


def test_sufficient_certificate_away_from_the_optimum(frozen_spec, grid, frozen_noise, basis,
                                                      picard):
    cert = sufficient_check(frozen_spec, _constant(frozen_spec, grid, 0.5), frozen_noise, grid,
                            basis, convexity_samples=20, picard=picard, tol=1e-3)
    # H(0.5) - min H = 0.125; the offset grid gets within 1e-3 of the minimiser
    assert 0.124 <= cert.minimization_residual <= 0.125 + 1e-12
    assert not cert.passed


def test_optimality_report(lq_spec, grid, small_noise, basis, picard, affine_policy):
    report = optimality_report(lq_spec, affine_policy, small_noise, grid, basis, picard,
                               convexity_samples=10, minimization_grid=5)
    record = report.to_record()
    assert record["paths"] == small_noise.path_count
    assert record["necessary_residual"] > 0
    assert report.directional_derivative.value <= 0.0
    assert "sufficient_passed" in record
