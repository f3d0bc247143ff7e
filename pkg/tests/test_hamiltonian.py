"""
Hamiltonian - unit tests
"""

import numpy as np
import pytest

from src.core.hamiltonian import (
    HamiltonianPoint,
    eval_H,
    finite_diff_check,
    grad_H,
    lambda_density,
    sample_points,
)
from src.data.builtin_problems import LinearQuadraticBundle, LqParams
from src.data.exceptions import NonFiniteOutputError, ProblemDefinitionError
from src.data.problem_model import ControlSet, MarkSpace, ProblemSpec


class WrongDriftSlope(LinearQuadraticBundle):
    def b_x(self, t, x, u):
        return 2.0 * super().b_x(t, x, u)


def test_value_at_a_hand_computed_point(lq_spec):
    pt = HamiltonianPoint.zeros(lq_spec, 1).with_values(
        x=np.array([[2.0]]), u=np.array([[1.0]]), p=np.array([[1.0]]))
    # l = (4 + 1) / 2, b = -2 + 1
    assert eval_H(lq_spec, pt)[0] == pytest.approx(1.5)
    assert grad_H(lq_spec, pt, "u")[0, 0] == pytest.approx(2.0)
    assert grad_H(lq_spec, pt, "x")[0, 0] == pytest.approx(1.0)


def test_jump_term_is_weighted_by_intensity(lq_variant):
    spec = lq_variant(intensity=3.0, jump_size=0.5)
    pt = HamiltonianPoint.zeros(spec, 2).with_values(q3=np.ones((2, 1, 1)))
    assert eval_H(spec, pt).tolist() == pytest.approx([1.5, 1.5])


def test_analytic_gradients_match_finite_differences(lq_variant):
    spec = lq_variant(hx=0.3, fy=0.4, gamma_weight=1.0)
    report = finite_diff_check(spec, sample_points(spec, 50, seed=3), tol=1e-6)
    assert report.passed, report.to_dict()
    assert set(report.per_direction) == {"x", "y", "z1", "z2", "Lambda", "u"}


def test_substituted_cost_loading_is_differentiated_through(lq_variant):
    spec = lq_variant(hx=0.3, c2=0.4)
    points = sample_points(spec, 30, seed=4)
    points = points.with_values(R2=np.linspace(-1.0, 1.0, points.size))
    assert finite_diff_check(spec, points, tol=1e-6).passed
    fixed_slot = points.with_values(R2=None)
    assert not np.allclose(grad_H(spec, points, "z2"), grad_H(spec, fixed_slot, "z2"))


def test_wrong_derivative_is_located():
    params = LqParams()
    spec = ProblemSpec(n=1, m=1, K=1, T=1.0, x0=(1.0,),
                       mark_space=MarkSpace(("jump",), (1.0,)),
                       control_set=ControlSet((-10.0,), (10.0,)),
                       coefficients=WrongDriftSlope(params))
    report = finite_diff_check(spec, sample_points(spec, 20, seed=0))
    assert not report.passed
    assert report.worst_direction == "x"


def test_zero_tolerance_never_passes(lq_spec):
    assert not finite_diff_check(lq_spec, sample_points(lq_spec, 5, seed=1), tol=0.0).passed


def test_lambda_density_ignores_massless_marks(lq_variant):
    spec = lq_variant(intensity=0.0)
    assert np.all(lambda_density(spec, np.ones((3, 1, 1))) == 0.0)
    spec = lq_variant(intensity=4.0)
    assert np.all(lambda_density(spec, np.ones((3, 1, 1))) == 0.25)


def test_unknown_direction(lq_spec):
    with pytest.raises(ProblemDefinitionError):
        grad_H(lq_spec, HamiltonianPoint.zeros(lq_spec, 1), "p")


def test_non_finite_value_is_reported(lq_spec):
    pt = HamiltonianPoint.zeros(lq_spec, 2).with_values(x=np.array([[0.0], [np.inf]]))
    with pytest.raises(NonFiniteOutputError):
        eval_H(lq_spec, pt)


def test_points_take_sub_batches(lq_spec):
    points = sample_points(lq_spec, 10, seed=2, t=0.5)
    head = points.take(slice(0, 3))
    assert head.size == 3
    assert head.t == 0.5
    assert np.array_equal(head.q3, points.q3[:3])
    assert lq_spec.control_set.contains(points.u)
