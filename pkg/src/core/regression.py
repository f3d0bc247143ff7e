"""
pomp-core - Least-squares conditional expectations

Polynomial regression used by every backward recursion. Regression
variables are standardised first; variables with no spread (all paths at
the same point, e.g. step 0) and exact duplicates of an earlier variable
(e.g. the running mean of Y at step 1) are dropped, so the design matrix
only fails to have full rank when the basis itself is degenerate.
"""

from dataclasses import dataclass
from itertools import combinations_with_replacement
from typing import List, Optional, Tuple

import numpy as np
import scipy.linalg

from src.data.exceptions import RegressionError

SPREAD_TOL = 1e-12
DUPLICATE_TOL = 1e-10
CONDITION_LIMIT = 1e12


@dataclass(frozen=True)
class BasisSpec:
    """
    Total-degree polynomial basis.

    variables=None lets the caller choose (x, Y, running mean of Y when the
    policy uses it, and k in the adjoint stage); otherwise a subset of
    {"x", "Y", "Y_avg", "k"}.
    """
    degree: int = 2
    ridge: float = 0.0
    variables: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        if int(self.degree) != self.degree or self.degree < 0:
            raise ValueError(f"basis degree must be a non-negative integer, got {self.degree}")
        if not self.ridge >= 0:
            raise ValueError(f"ridge must be >= 0, got {self.ridge}")
        if self.variables is not None:
            unknown = set(self.variables) - {"x", "Y", "Y_avg", "k"}
            if unknown:
                raise ValueError(f"unknown regression variables {sorted(unknown)}")

    def uses(self, variable: str, default: bool) -> bool:
        return default if self.variables is None else variable in self.variables


@dataclass(frozen=True, eq=False)
class PolynomialBasis:
    """Standardisation and monomial exponents fixed on a training sample."""
    mean: np.ndarray
    scale: np.ndarray
    kept: np.ndarray
    exponents: Tuple[Tuple[int, ...], ...]

    @property
    def size(self) -> int:
        return len(self.exponents)

    def transform(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=float)
        if features.ndim == 1:
            features = features[:, None]
        Z = (features[:, self.kept] - self.mean) / self.scale
        columns = [np.ones(features.shape[0])]
        for combo in self.exponents[1:]:
            col = Z[:, combo[0]].copy()
            for j in combo[1:]:
                col *= Z[:, j]
            columns.append(col)
        return np.stack(columns, axis=1)


def fit_basis(features: np.ndarray, degree: int) -> PolynomialBasis:
    features = np.asarray(features, dtype=float)
    if features.ndim == 1:
        features = features[:, None]
    mean = features.mean(axis=0)
    std = features.std(axis=0)
    candidates = np.flatnonzero(std > SPREAD_TOL * (1.0 + np.abs(mean)))

    kept: List[int] = []
    for j in candidates:
        zj = (features[:, j] - mean[j]) / std[j]
        duplicate = False
        for i in kept:
            zi = (features[:, i] - mean[i]) / std[i]
            if abs(float(np.mean(zi * zj))) > 1.0 - DUPLICATE_TOL:
                duplicate = True
                break
        if not duplicate:
            kept.append(int(j))

    exponents: List[Tuple[int, ...]] = [()]
    for d in range(1, degree + 1):
        exponents.extend(combinations_with_replacement(range(len(kept)), d))
    kept_arr = np.asarray(kept, dtype=int)
    return PolynomialBasis(mean=mean[kept_arr], scale=std[kept_arr], kept=kept_arr,
                           exponents=tuple(exponents))


@dataclass(frozen=True, eq=False)
class RegressionFit:
    coefficients: np.ndarray   # (basis size, D)
    fitted: np.ndarray         # (P, D)
    basis: PolynomialBasis

    def predict(self, features: np.ndarray) -> np.ndarray:
        return self.basis.transform(features) @ self.coefficients


def regress(features: np.ndarray, targets: np.ndarray, basis: BasisSpec) -> RegressionFit:
    """
    Ridge-regularised least squares of `targets` (P, D) on the polynomial
    basis of `features` (P, F). Fitted values approximate the conditional
    expectation of the targets given the features.
    """
    features = np.asarray(features, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if targets.ndim == 1:
        targets = targets[:, None]
    P = targets.shape[0]
    if features.shape[0] != P:
        raise RegressionError(f"{features.shape[0]} feature rows but {P} target rows")

    poly = fit_basis(features, basis.degree)
    if P <= poly.size:
        raise RegressionError(f"need more paths ({P}) than basis functions ({poly.size})")
    A = poly.transform(features)

    gram = A.T @ A / P
    rhs = A.T @ targets / P
    if basis.ridge > 0:
        gram[1:, 1:] += basis.ridge * np.eye(poly.size - 1)
    else:
        eig = np.linalg.eigvalsh(gram)
        if eig[0] <= eig[-1] / CONDITION_LIMIT:
            raise RegressionError(
                "normal equations are rank-deficient "
                f"(condition {eig[-1] / max(eig[0], 1e-300):.1e}); set ridge > 0"
            )
    try:
        coefficients = scipy.linalg.solve(gram, rhs, assume_a="pos")
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as e:
        raise RegressionError(f"normal equations could not be solved: {e}; set ridge > 0") from e

    return RegressionFit(coefficients=coefficients, fitted=A @ coefficients, basis=poly)
