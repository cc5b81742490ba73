"""Just-identified method-of-moments machinery.

Linear IV solves, sample Jacobians (numeric cross-check) and the sandwich
covariance shared by every estimator in the package.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable

import numpy as np
import scipy.linalg

from .exceptions import NonFiniteMoment, SingularSystem

COND_LIMIT = 1e12


@dataclass(frozen=True)
class MomentSystem:
    """A just-identified moment system.

    ``moment_fn(data, theta)`` returns the ``(N, dim_moments)`` array of
    per-observation moments; row ``i`` depends only on observation ``i``.
    """

    moment_fn: Callable[[Any, np.ndarray], np.ndarray]
    dim_theta: int
    dim_moments: int | None = None

    def __post_init__(self):
        if self.dim_moments is None:
            object.__setattr__(self, "dim_moments", self.dim_theta)
        if self.dim_moments != self.dim_theta:
            raise ValueError(
                f"system is not just-identified: {self.dim_moments} moments, "
                f"{self.dim_theta} parameters"
            )

    def moments(self, data, theta):
        m = np.asarray(self.moment_fn(data, np.asarray(theta, dtype=float)), dtype=float)
        if m.ndim != 2 or m.shape[1] != self.dim_moments:
            raise ValueError(f"moment_fn returned shape {m.shape}, expected (N, {self.dim_moments})")
        return m


@dataclass(frozen=True)
class SandwichCov:
    jacobian: np.ndarray
    meat: np.ndarray
    cov: np.ndarray
    influence: np.ndarray

    @property
    def stderr(self):
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))


def lu_solve_checked(A, B, what="system"):
    """Solve ``A x = B`` by pivoted LU, raising SingularSystem past the condition limit."""
    A = np.asarray(A, dtype=float)
    if A.size and not np.all(np.isfinite(A)):
        raise SingularSystem(f"{what} matrix has non-finite entries")
    cond = np.linalg.cond(A) if A.size else 1.0
    if not np.isfinite(cond) or cond >= COND_LIMIT:
        raise SingularSystem(f"{what} is numerically singular (condition number {cond:.3g})")
    lu = scipy.linalg.lu_factor(A, check_finite=False)
    return scipy.linalg.lu_solve(lu, B, check_finite=False)


def solve_linear_iv(Q, D, y):
    """Just-identified linear IV: the ``theta`` solving ``sum_i Q_i (y_i - D_i' theta) = 0``.

    Parameters
    ----------
    Q : (N, p) array
        Instruments.
    D : (N, p) array
        Regressors.
    y : (N,) array
        Outcome.

    Raises
    ------
    SingularSystem
        If ``Q'D / N`` has condition number at or above ``1e12``. This is how
        overlap failures and collinear bases show up.
    """
    Q = np.asarray(Q, dtype=float)
    D = np.asarray(D, dtype=float)
    y = np.asarray(y, dtype=float)
    if Q.ndim == 1:
        Q = Q[:, None]
    if D.ndim == 1:
        D = D[:, None]
    if Q.shape != D.shape:
        raise ValueError(f"instruments {Q.shape} and regressors {D.shape} differ in shape")
    n = Q.shape[0]
    A = Q.T @ D / n
    b = Q.T @ y / n
    return lu_solve_checked(A, b, "instrument/regressor cross-moment")


def numeric_jacobian(system: MomentSystem, data, theta):
    """Central-difference Jacobian of the sample-average moment vector."""
    theta = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise ValueError("theta must be finite")
    p = system.dim_theta
    jac = np.empty((system.dim_moments, p))
    for j in range(p):
        h = max(1e-6, 1e-6 * abs(theta[j]))
        up = theta.copy()
        dn = theta.copy()
        up[j] += h
        dn[j] -= h
        m_up = system.moments(data, up).mean(axis=0)
        m_dn = system.moments(data, dn).mean(axis=0)
        if not (np.all(np.isfinite(m_up)) and np.all(np.isfinite(m_dn))):
            raise NonFiniteMoment(f"non-finite moments when perturbing parameter {j}")
        jac[:, j] = (m_up - m_dn) / (2 * h)
    return jac


def sandwich_from_moments(m, jacobian):
    """Sandwich covariance from per-row moments ``m`` (N, p) and the Jacobian."""
    m = np.asarray(m, dtype=float)
    n = m.shape[0]
    if not np.all(np.isfinite(m)):
        raise NonFiniteMoment("moments contain non-finite values")
    jacobian = np.asarray(jacobian, dtype=float)
    # influence_i = -J^{-1} m_i, so cov = J^{-1} (m'm/N) J^{-T} / N
    infl = -lu_solve_checked(jacobian, m.T, "moment Jacobian").T
    meat = m.T @ m / n
    cov = infl.T @ infl / n**2
    cov = (cov + cov.T) / 2
    return SandwichCov(jacobian=jacobian, meat=meat, cov=cov, influence=infl)


def sandwich(system: MomentSystem, data, theta, jacobian):
    return sandwich_from_moments(system.moments(data, theta), jacobian)
