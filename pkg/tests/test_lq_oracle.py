"""
LQ reference solutions - unit tests
"""

import numpy as np
import pytest

from src.core.lq_oracle import discrete_lqr, open_loop_moments, riccati_solution
from src.data.builtin_problems import LqParams


def test_riccati_matches_fine_discrete_lqr():
    params = LqParams()
    riccati = riccati_solution(params)
    lqr = discrete_lqr(params, N=4000)
    assert riccati.P[-1] == pytest.approx(params.wT)
    assert lqr.P[0] == pytest.approx(riccati.P[0], rel=1e-3)


def test_noise_free_value_is_the_discrete_cost():
    params = LqParams(c1=0.0, c2=0.0, jump_size=0.0)
    value = riccati_solution(params).value(params.x0)
    assert value == pytest.approx(discrete_lqr(params, N=4000).cost(params.x0), rel=1e-3)


def test_noise_adds_to_the_value():
    quiet = LqParams(c1=0.0, c2=0.0, jump_size=0.0)
    noisy = LqParams()
    assert riccati_solution(noisy).value(1.0) > riccati_solution(quiet).value(1.0)


def test_terminal_feedback():
    params = LqParams(wT=2.0, b_u=1.0, qu=0.5)
    # u*(T, x) = -b_u wT x / qu
    assert riccati_solution(params).feedback(params.T, 1.5) == pytest.approx(-6.0, rel=1e-6)


def test_open_loop_moments_without_drift():
    params = LqParams(a=0.0)
    moments = open_loop_moments(params, 0.0)
    v = 0.5 ** 2 + 0.3 ** 2 + 0.2 ** 2
    assert moments.mean_T == pytest.approx(1.0)
    assert moments.variance_T == pytest.approx(v)
    # running 1/2 (v t + 1) integrated plus terminal 1/2 (v + 1)
    assert moments.cost == pytest.approx(0.5 * (v / 2 + 1.0) + 0.5 * (v + 1.0))
    assert moments.costate0 == pytest.approx(2.0)


def test_open_loop_accepts_a_control_path():
    params = LqParams(a=0.0, qu=2.0)
    constant = open_loop_moments(params, 0.5)
    as_function = open_loop_moments(params, lambda t: 0.5)
    assert constant.cost == pytest.approx(as_function.cost)
    assert constant.mean_T == pytest.approx(1.5)


def test_discrete_lqr_rejects_affine_terms():
    with pytest.raises(ValueError):
        discrete_lqr(LqParams(b0=0.1), N=10)


def test_riccati_needs_a_control_weight():
    with pytest.raises(ValueError):
        riccati_solution(LqParams(qu=0.0))


def test_discrete_gains_are_positive():
    lqr = discrete_lqr(LqParams(), N=50)
    assert np.all(lqr.gains > 0)
    assert lqr.P.shape == (51,)
