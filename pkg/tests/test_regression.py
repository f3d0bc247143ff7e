"""
Least-squares conditional expectation - unit tests
"""

import numpy as np
import pytest

from src.core.regression import BasisSpec, fit_basis, regress
from src.data.exceptions import RegressionError


def test_linear_targets_are_fitted_exactly(rng):
    x = rng.normal(size=(200, 1))
    fit = regress(x, 2.0 + 3.0 * x[:, 0], BasisSpec(degree=1))
    assert np.allclose(fit.fitted[:, 0], 2.0 + 3.0 * x[:, 0])
    assert fit.predict(np.array([[1.0]]))[0, 0] == pytest.approx(5.0)


def test_fitted_mean_equals_target_mean(rng):
    x = rng.normal(size=(500, 2))
    y = np.sin(x[:, 0]) * x[:, 1] + rng.normal(size=500)
    fit = regress(x, y, BasisSpec(degree=2))
    assert fit.fitted.mean() == pytest.approx(y.mean())


def test_constant_variables_are_dropped():
    features = np.column_stack([np.zeros(10), np.ones(10)])
    poly = fit_basis(features, degree=2)
    assert poly.size == 1
    fit = regress(features, np.arange(10.0), BasisSpec(degree=2))
    assert np.allclose(fit.fitted[:, 0], 4.5)


def test_duplicate_variables_are_dropped(rng):
    x = rng.normal(size=100)
    poly = fit_basis(np.column_stack([x, 2.0 * x + 1.0]), degree=2)
    assert poly.kept.tolist() == [0]
    assert poly.size == 3


def test_too_few_paths():
    x = np.array([[0.0], [1.0], [2.0]])
    with pytest.raises(RegressionError, match="more paths"):
        regress(x, x[:, 0], BasisSpec(degree=2))


def test_degenerate_basis_needs_ridge():
    x = np.tile([0.0, 1.0], 20)[:, None]
    with pytest.raises(RegressionError, match="ridge"):
        regress(x, x[:, 0], BasisSpec(degree=2))
    fit = regress(x, x[:, 0], BasisSpec(degree=2, ridge=1e-6))
    assert np.allclose(fit.fitted[:, 0], x[:, 0], atol=1e-4)


def test_row_mismatch():
    with pytest.raises(RegressionError):
        regress(np.zeros((5, 1)), np.zeros(4), BasisSpec(degree=1))


@pytest.mark.parametrize("kwargs", [{"degree": -1}, {"degree": 1.5}, {"ridge": -0.1},
                                    {"variables": ("x", "z")}])
def test_basis_spec_validation(kwargs):
    with pytest.raises(ValueError):
        BasisSpec(**kwargs)


def test_basis_variable_selection():
    assert BasisSpec().uses("Y_avg", default=True)
    assert not BasisSpec(variables=("x",)).uses("Y", default=True)
