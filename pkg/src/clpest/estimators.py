"""Estimators of the average CLP slope.

``oaxaca_blinder``
    OLS of ``y`` on ``R`` and ``X``; consistent when the CLP working model
    is right.
``gipw``
    IV fit of ``y`` on ``X`` with the GPS instrument and no constant;
    consistent when the GPS is right.
``dr``
    IV fit of ``y`` on ``R`` and ``X`` with the GPS instrument for ``X``;
    consistent when either model is right and efficient when both are.
``plm``
    ``dr`` without the ``(k(W) - mu) kron X`` interactions.

Standard errors come from the stacked just-identified moment system
``(score, k(W) - mu, [R; Z] U)`` so that estimating the GPS coefficients and
the basis means is accounted for.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .basis import BasisSpec, linear_basis
from .clp import ClpBasis, build_R_rows
from .data import Dataset, as_2d, check_arrays
from .exceptions import ConfigError, ConvergenceError, DataError
from .gps import GpsFamily, GpsFit, fit_mle
from .mom import MomentSystem, lu_solve_checked, sandwich_from_moments, solve_linear_iv

Z95 = 1.96
PHI_JACOBIANS = ("gime", "exact")
PHI_INFORMATION = ("opg", "hessian")
SE_METHODS = ("sandwich", "influence")


@dataclass(frozen=True)
class Estimate:
    """Point estimate, nuisance coefficients and influence-function inference."""

    beta: np.ndarray
    cov_beta: np.ndarray
    influence: np.ndarray
    estimator: str
    gps: str = ""
    basis: str = ""
    nuisance: np.ndarray = field(default_factory=lambda: np.zeros(0))
    theta: np.ndarray | None = None
    cov_theta: np.ndarray | None = None
    treatment_names: tuple[str, ...] = ()

    @property
    def n(self):
        return self.influence.shape[0]

    @property
    def stderr(self):
        return np.sqrt(np.diag(self.cov_beta))

    @property
    def ci95(self):
        se = self.stderr
        return np.column_stack([self.beta - Z95 * se, self.beta + Z95 * se])

    def to_records(self):
        names = self.treatment_names or tuple(f"x{k + 1}" for k in range(len(self.beta)))
        ci = self.ci95
        return [
            {
                "estimator": self.estimator,
                "treatment": names[k],
                "beta": float(self.beta[k]),
                "stderr": float(self.stderr[k]),
                "ci_low": float(ci[k, 0]),
                "ci_high": float(ci[k, 1]),
                "n": int(self.n),
                "gps": self.gps,
                "basis": self.basis,
            }
            for k in range(len(self.beta))
        ]


def _as_dataset(data):
    if isinstance(data, Dataset):
        return data
    y, X, W = data
    return Dataset(y, X, W)


def _check_size(data, dim_theta):
    if data.n < dim_theta + 1:
        raise DataError(f"{data.n} observations cannot identify {dim_theta} parameters")


class StackedSystem:
    """Stacked moments over ``theta = (phi, mu, lambda, beta)``.

    Without a GPS fit the treatment instruments itself and ``phi`` is absent
    (the Oaxaca-Blinder case). Moment blocks, in order::

        score(phi)                      dim_phi
        k(W) - mu                       J
        R(mu) U                         1 + J [+ J K]
        Z(phi) U                        K

    with ``U = y - R(mu)' lambda - X' beta``.
    """

    def __init__(self, data: Dataset, clp: ClpBasis, fit: GpsFit | None = None):
        self.data = data
        self.clp = clp
        self.fit = fit
        self.family: GpsFamily | None = fit.family if fit is not None else None
        self.kw = clp.basis.evaluate(data.W) if clp.J else np.zeros((data.n, 0))
        self.kg = self.family.design(data.W) if fit is not None else None
        self.K = data.k
        self.J = clp.J
        self.P = clp.dim_R(self.K)
        self.dim_phi = self.family.dim_phi if fit is not None else 0
        self.dim_theta = self.dim_phi + self.J + self.P + self.K

    def split(self, theta):
        a, J, P = self.dim_phi, self.J, self.P
        return theta[:a], theta[a:a + J], theta[a + J:a + J + P], theta[a + J + P:]

    def _pieces(self, theta):
        phi, mu, lam, beta = self.split(theta)
        X, y = self.data.X, self.data.y
        wc = self.kw - mu
        R = build_R_rows(wc, X, self.clp.include_interactions)
        U = y - R @ lam - X @ beta
        if self.fit is None:
            Z, S = X, np.zeros((self.data.n, 0))
        else:
            Z = self.family.instrument_rows(phi, X, self.kg)
            S = self.family.score_rows(phi, X, self.kg)
        return phi, mu, lam, beta, wc, R, U, Z, S

    def moments(self, data, theta):
        _, mu, _, _, _, R, U, Z, S = self._pieces(np.asarray(theta, dtype=float))
        return np.concatenate([S, self.kw - mu, R * U[:, None], Z * U[:, None]], axis=1)

    @property
    def system(self):
        return MomentSystem(self.moments, self.dim_theta)

    def solve(self):
        """theta-hat: MLE phi, sample-mean mu, then the linear IV for (lambda, beta)."""
        phi = self.fit.phi_hat if self.fit is not None else np.zeros(0)
        mu = self.kw.mean(axis=0) if self.J else np.zeros(0)
        X = self.data.X
        R = build_R_rows(self.kw - mu, X, self.clp.include_interactions)
        Z = self.fit.instrument_rows(X, self.data.W) if self.fit is not None else X
        coef = solve_linear_iv(np.hstack([R, Z]), np.hstack([R, X]), self.data.y)
        return np.concatenate([phi, mu, coef])

    def jacobian(self, theta, phi_jacobian="gime", phi_information="opg"):
        """Sample Jacobian of the mean moments.

        ``phi_jacobian="exact"`` differentiates the instrument in ``phi``
        directly and uses the sample Hessian for the score block; this is the
        derivative a finite-difference check reproduces. ``"gime"`` replaces
        the instrument block by ``-mean(Z U S')`` (generalized information
        matrix equality) and the score block by ``-mean(S S')`` when
        ``phi_information="opg"`` or the Hessian when ``"hessian"``.
        """
        if phi_jacobian not in PHI_JACOBIANS:
            raise ConfigError(f"phi_jacobian must be one of {PHI_JACOBIANS}")
        if phi_information not in PHI_INFORMATION:
            raise ConfigError(f"phi_information must be one of {PHI_INFORMATION}")
        theta = np.asarray(theta, dtype=float)
        phi, mu, lam, beta, wc, R, U, Z, S = self._pieces(theta)
        n = self.data.n
        X = self.data.X
        a, J, P, K = self.dim_phi, self.J, self.P, self.K
        inter = self.clp.include_interactions
        iphi = slice(0, a)
        imu = slice(a, a + J)
        ilam = slice(a + J, a + J + P)
        ibeta = slice(a + J + P, a + J + P + K)
        r_rows = ilam
        z_rows = ibeta
        M = np.zeros((self.dim_theta, self.dim_theta))

        if a:
            if phi_jacobian == "exact" or phi_information == "hessian":
                M[iphi, iphi] = self.family.hessian(phi, X, self.kg)
            else:
                M[iphi, iphi] = -S.T @ S / n
            if phi_jacobian == "exact":
                dZ = self.family.instrument_jacobian_rows(phi, X, self.kg)
                M[z_rows, iphi] = np.einsum("ika,i->ka", dZ, U) / n
            else:
                M[z_rows, iphi] = -(Z * U[:, None]).T @ S / n

        M[imu, imu] = -np.eye(J)

        # dU/dmu = g_i = gamma + Delta x_i, with Delta the (J, K) interaction coefficients
        gamma = lam[1:1 + J]
        if inter:
            delta = lam[1 + J:].reshape(J, K)
            G = gamma[None, :] + X @ delta.T
        else:
            G = np.broadcast_to(gamma, (n, J))
        dRU = R.T @ G / n
        dRU[1:1 + J, :] -= np.eye(J) * U.mean()
        if inter:
            xu = X.T @ U / n
            for j in range(J):
                dRU[1 + J + j * K:1 + J + (j + 1) * K, j] -= xu
        M[r_rows, imu] = dRU
        M[z_rows, imu] = Z.T @ G / n

        M[r_rows, ilam] = -R.T @ R / n
        M[r_rows, ibeta] = -R.T @ X / n
        M[z_rows, ilam] = -Z.T @ R / n
        M[z_rows, ibeta] = -Z.T @ X / n
        return M

    def plugin_influence(self, theta):
        """Influence rows ``Z U - Pi S + Delta (k(W) - mu)`` with population identities.

        Uses ``E[Z X'] = I`` and ``E[Z R'] = 0``, which hold when the GPS is
        correct; ``Pi`` regresses ``Z U`` on the scores. Under a wrong GPS
        this overstates the variance.
        """
        _, _, lam, _, wc, _, U, Z, S = self._pieces(theta)
        ZU = Z * U[:, None]
        pi = lu_solve_checked(S.T @ S, S.T @ ZU, "score outer product").T
        infl = ZU - S @ pi.T
        if self.clp.include_interactions and self.J:
            delta = lam[1 + self.J:].reshape(self.J, self.K)
            infl = infl + wc @ delta
        return infl

    def estimate(self, name, phi_jacobian="gime", phi_information="opg", se_method="sandwich"):
        if se_method not in SE_METHODS:
            raise ConfigError(f"se_method must be one of {SE_METHODS}")
        _check_size(self.data, self.dim_theta)
        theta = self.solve()
        m = self.moments(self.data, theta)
        sw = sandwich_from_moments(m, self.jacobian(theta, phi_jacobian, phi_information))
        ib = slice(self.dim_theta - self.K, self.dim_theta)
        il = slice(self.dim_phi + self.J, self.dim_theta - self.K)
        if se_method == "influence":
            if self.fit is None:
                raise ConfigError("the plug-in influence function needs a GPS fit")
            infl = self.plugin_influence(theta)
            cov = infl.T @ infl / self.data.n**2
        else:
            infl, cov = sw.influence[:, ib], sw.cov[ib, ib]
        return Estimate(
            beta=theta[ib],
            cov_beta=cov,
            influence=infl,
            estimator=name,
            gps=self.family.kind if self.family is not None else "",
            basis=self.clp.basis.describe(),
            nuisance=theta[il],
            theta=theta,
            cov_theta=sw.cov,
            treatment_names=self.data.treatment_names,
        )


def _require_converged(fit):
    if not fit.converged:
        raise ConvergenceError(f"GPS fit ({fit.family.kind}) did not converge")


def oaxaca_blinder(data, clp: ClpBasis):
    """Least squares of ``y`` on ``R(mu-hat)`` and ``X``; the coefficient on ``X``."""
    data = _as_dataset(data)
    return StackedSystem(data, clp).estimate("ob")


def dr(data, fit: GpsFit, clp: ClpBasis, phi_jacobian="gime", phi_information="opg",
       se_method="sandwich"):
    """Doubly robust estimate: IV fit of ``y`` on ``R`` and ``X`` with ``Z`` instrumenting ``X``.

    ``se_method="sandwich"`` (default) takes the beta block of the stacked
    sandwich with sample-analog Jacobian blocks. ``"influence"`` uses
    :meth:`StackedSystem.plugin_influence`, which is conservative when the
    GPS is misspecified.
    """
    data = _as_dataset(data)
    _require_converged(fit)
    name = "dr" if clp.include_interactions else "plm"
    return StackedSystem(data, clp, fit).estimate(name, phi_jacobian, phi_information, se_method)


def plm(data, fit: GpsFit, clp: ClpBasis, phi_jacobian="gime", phi_information="opg",
        se_method="sandwich"):
    """Partially linear variant: ``dr`` with the interaction block dropped from ``R``."""
    clp = ClpBasis(clp.basis, include_interactions=False, mu_hat=clp.mu_hat)
    return dr(data, fit, clp, phi_jacobian, phi_information, se_method)


def gipw(data, fit: GpsFit, correct_phi=True):
    """Generalized IPW: IV fit of ``y`` on ``X`` (no constant) instrumented by ``Z``.

    The influence function is ``J^{-1}(rho_i - Pi S_i)`` with
    ``rho_i = Z_i (y_i - X_i' beta)``, ``J = mean(Z X')`` and ``Pi`` the
    coefficient of the sample regression of ``rho`` on the GPS scores. With
    ``correct_phi=False`` the projection is skipped, which ignores the
    estimation of the GPS and gives conservative intervals.
    """
    data = _as_dataset(data)
    _require_converged(fit)
    X, y = data.X, data.y
    k = data.k
    _check_size(data, fit.family.dim_phi + k)
    Z = fit.instrument_rows(X, data.W)
    beta = solve_linear_iv(Z, X, y)
    rho = Z * (y - X @ beta)[:, None]
    n = data.n
    jac = Z.T @ X / n
    if correct_phi:
        S = fit.score_rows(X, data.W)
        pi = lu_solve_checked(S.T @ S, S.T @ rho, "score outer product").T
        core = rho - S @ pi.T
    else:
        core = rho
    infl = lu_solve_checked(jac, core.T, "instrument/treatment cross-moment").T
    cov = infl.T @ infl / n**2
    return Estimate(
        beta=beta,
        cov_beta=(cov + cov.T) / 2,
        influence=infl,
        estimator="gipw",
        gps=fit.family.kind,
        basis=fit.family.basis.describe(),
        theta=np.concatenate([fit.phi_hat, beta]),
        treatment_names=data.treatment_names,
    )


# -- sklearn-style wrappers --------------------------------------------------


def _default_gps_basis(p):
    return linear_basis(p, constant=True)


def _default_clp_basis(p):
    return linear_basis(p, constant=False)


class _SlopeEstimator(BaseEstimator):
    """Shared fit/predict plumbing. ``fit(X, y, W)``: treatments, outcome, controls."""

    _uses_gps = True
    _uses_clp = True

    def _prepare(self, X, y, W):
        y, X, W = check_arrays(y, X, W)
        data = Dataset(y, X, W)
        p = W.shape[1]
        clp = None
        if self._uses_clp:
            basis = self.clp_basis if self.clp_basis is not None else _default_clp_basis(p)
            clp = ClpBasis(basis.without_constant(), self._interactions()).fitted(W)
        fit = None
        if self._uses_gps:
            basis = self.gps_basis if self.gps_basis is not None else _default_gps_basis(p)
            ncat = X.shape[1]
            fit = fit_mle(GpsFamily(self.gps, basis, ncat), X, W)
            self.gps_fit_ = fit
        return data, clp, fit

    def _interactions(self):
        return True

    def _store(self, est: Estimate, data, clp):
        self.estimate_ = est
        self.coef_ = est.beta
        self.stderr_ = est.stderr
        self.cov_ = est.cov_beta
        self.ci95_ = est.ci95
        self.influence_ = est.influence
        self.n_features_in_ = data.W.shape[1]
        self.clp_ = clp
        if clp is not None:
            self.intercept_ = est.nuisance[0]
        return self

    def predict(self, X, W):
        """Fitted working-model CLP ``a(W) + X' b(W)`` at new points."""
        if self.clp_ is None:
            raise AttributeError(f"{type(self).__name__} has no CLP working model to predict with")
        X = as_2d(X, "treatments")
        W = as_2d(W, "controls")
        R = build_R_rows(self.clp_.centered(W), X, self.clp_.include_interactions)
        return R @ self.estimate_.nuisance + X @ self.coef_


class OaxacaBlinder(_SlopeEstimator):
    _uses_gps = False

    def __init__(self, clp_basis: BasisSpec | None = None):
        self.clp_basis = clp_basis

    def fit(self, X, y, W=None):
        data, clp, _ = self._prepare(X, y, W)
        return self._store(oaxaca_blinder(data, clp), data, clp)


class GIPW(_SlopeEstimator):
    _uses_clp = False

    def __init__(self, gps="poisson", gps_basis: BasisSpec | None = None, correct_phi=True):
        self.gps = gps
        self.gps_basis = gps_basis
        self.correct_phi = correct_phi

    def fit(self, X, y, W=None):
        data, clp, fit = self._prepare(X, y, W)
        return self._store(gipw(data, fit, self.correct_phi), data, clp)


class DoublyRobust(_SlopeEstimator):
    """Locally efficient, doubly robust estimator of the average CLP slope.

    Parameters
    ----------
    gps : str
        GPS family: ``"logit"``, ``"poisson"`` or ``"multinomial"``.
    gps_basis, clp_basis : BasisSpec, optional
        Bases for the GPS index and the CLP working model. Default to the
        controls entered linearly (the GPS basis adds a constant).
    phi_jacobian, phi_information : str
        How the GPS block of the Jacobian is estimated, see
        :meth:`StackedSystem.jacobian`.
    se_method : {"sandwich", "influence"}
        See :func:`dr`.
    """

    def __init__(self, gps="poisson", gps_basis=None, clp_basis=None,
                 phi_jacobian="gime", phi_information="opg", se_method="sandwich"):
        self.gps = gps
        self.gps_basis = gps_basis
        self.clp_basis = clp_basis
        self.phi_jacobian = phi_jacobian
        self.phi_information = phi_information
        self.se_method = se_method

    def fit(self, X, y, W=None):
        data, clp, fit = self._prepare(X, y, W)
        est = dr(data, fit, clp, self.phi_jacobian, self.phi_information, self.se_method)
        return self._store(est, data, clp)


class PartiallyLinear(DoublyRobust):
    def _interactions(self):
        return False


ESTIMATORS = {"ob": OaxacaBlinder, "gipw": GIPW, "dr": DoublyRobust, "plm": PartiallyLinear}
