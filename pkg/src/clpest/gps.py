"""Parametric generalized propensity scores.

Three families are supported, each a GLM for the treatment given the control
basis ``k(W)``:

``bernoulli_logit``
    Binary ``X``; ``e = sigmoid(k'phi)``, ``v = e (1 - e)``.
``poisson_log``
    Count ``X``; ``e = v = exp(k'phi)``.
``multinomial_logit``
    ``K`` indicator columns for categories ``1..K`` (category 0 is the base,
    with coefficients fixed at zero); ``e = p`` and ``v = diag(p) - p p'``.

Coefficients are held as an ``(L, K)`` matrix (``K = 1`` for the scalar
families). Wherever a flat parameter vector is needed (moment stacking,
numeric differentiation) it is the column-major ravel, i.e. the coefficients
of category 1 followed by those of category 2 and so on.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logsumexp
from sklearn.base import BaseEstimator, TransformerMixin

from .basis import BasisSpec, linear_basis
from .data import as_2d
from .exceptions import (
    ConfigError,
    ConvergenceError,
    DegenerateVariance,
    Separation,
    SingularSystem,
    SupportViolation,
)
from .mom import lu_solve_checked

KINDS = ("bernoulli_logit", "poisson_log", "multinomial_logit")
CLI_NAMES = {"logit": "bernoulli_logit", "poisson": "poisson_log", "multinomial": "multinomial_logit"}
VAR_EPS = 1e-12
_EXP_CLIP = 700.0


@dataclass(frozen=True)
class GpsFamily:
    kind: str
    basis: BasisSpec
    n_categories: int = 1

    def __post_init__(self):
        kind = CLI_NAMES.get(self.kind, self.kind)
        if kind not in KINDS:
            raise ConfigError(f"unknown GPS family {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if len(self.basis) < 1:
            raise ConfigError("GPS basis needs at least one term")
        if kind != "multinomial_logit" and self.n_categories != 1:
            raise ConfigError(f"{kind} takes a single treatment column")
        if kind == "multinomial_logit" and self.n_categories < 1:
            raise ConfigError("multinomial family needs at least one non-base category")

    @property
    def dim_phi(self):
        return len(self.basis) * self.n_categories

    def design(self, W):
        return self.basis.evaluate(W)

    def check_support(self, X):
        """Validate treatments; returns True when Poisson counts are non-integer."""
        X = as_2d(X, "treatments")
        if X.shape[1] != self.n_categories:
            raise SupportViolation(
                f"{self.kind} expects {self.n_categories} treatment column(s), got {X.shape[1]}"
            )
        if self.kind == "bernoulli_logit":
            bad = ~np.isin(X[:, 0], (0.0, 1.0))
            if bad.any():
                raise SupportViolation(f"binary treatment has value {X[bad, 0][0]!r} at row {np.argmax(bad)}")
        elif self.kind == "poisson_log":
            if np.any(X < 0):
                raise SupportViolation(f"Poisson treatment negative at row {int(np.argmax(X[:, 0] < 0))}")
            return bool(np.any(X != np.round(X)))
        else:
            if not np.all(np.isin(X, (0.0, 1.0))) or np.any(X.sum(axis=1) > 1):
                raise SupportViolation("multinomial treatments must be indicator columns with at most one 1 per row")
        return False

    # -- per-row quantities as functions of a flat parameter vector ----------

    def _coef(self, phi):
        return np.asarray(phi, dtype=float).reshape(len(self.basis), self.n_categories, order="F")

    def index(self, phi, Kw):
        return Kw @ self._coef(phi)

    def probs(self, phi, Kw):
        """Conditional means e (N, K)."""
        eta = self.index(phi, Kw)
        if self.kind == "bernoulli_logit":
            return expit(eta)
        if self.kind == "poisson_log":
            return np.exp(np.minimum(eta, _EXP_CLIP))
        full = np.concatenate([np.zeros((eta.shape[0], 1)), eta], axis=1)
        return np.exp(eta - logsumexp(full, axis=1, keepdims=True))

    def base_prob(self, phi, Kw):
        eta = self.index(phi, Kw)
        full = np.concatenate([np.zeros((eta.shape[0], 1)), eta], axis=1)
        return np.exp(-logsumexp(full, axis=1))

    def loglik_rows(self, phi, X, Kw):
        eta = self.index(phi, Kw)
        X = as_2d(X, "treatments")
        if self.kind == "bernoulli_logit":
            x, t = X[:, 0], eta[:, 0]
            return x * t - np.logaddexp(0.0, t)
        if self.kind == "poisson_log":
            from scipy.special import gammaln

            x, t = X[:, 0], eta[:, 0]
            return x * t - np.exp(np.minimum(t, _EXP_CLIP)) - gammaln(x + 1)
        full = np.concatenate([np.zeros((eta.shape[0], 1)), eta], axis=1)
        return np.sum(X * eta, axis=1) - logsumexp(full, axis=1)

    def score_rows(self, phi, X, Kw):
        X = as_2d(X, "treatments")
        resid = X - self.probs(phi, Kw)
        # block k of the score is (x_k - e_k) k(W)
        return np.concatenate([resid[:, [k]] * Kw for k in range(self.n_categories)], axis=1)

    def hessian(self, phi, X, Kw):
        """Sample-average Hessian of the log-likelihood (negative definite)."""
        n, L = Kw.shape
        e = self.probs(phi, Kw)
        if self.kind != "multinomial_logit":
            w = e[:, 0] * (1 - e[:, 0]) if self.kind == "bernoulli_logit" else e[:, 0]
            return -(Kw * w[:, None]).T @ Kw / n
        K = self.n_categories
        H = np.empty((L * K, L * K))
        for j in range(K):
            for l in range(K):
                w = e[:, j] * ((j == l) - e[:, l])
                H[j * L:(j + 1) * L, l * L:(l + 1) * L] = -(Kw * w[:, None]).T @ Kw / n
        return H

    def mean_var_rows(self, phi, Kw):
        """Conditional mean (N, K) and variance (N, K, K) of the treatment."""
        e = self.probs(phi, Kw)
        if self.kind == "bernoulli_logit":
            v = (e * (1 - e))[:, :, None]
        elif self.kind == "poisson_log":
            v = e[:, :, None].copy()
        else:
            v = -e[:, :, None] * e[:, None, :]
            idx = np.arange(e.shape[1])
            v[:, idx, idx] += e
        return e, v

    def instrument_rows(self, phi, X, Kw):
        """Z_i = v(W_i)^{-1} (X_i - e(W_i)) for every row."""
        X = as_2d(X, "treatments")
        e = self.probs(phi, Kw)
        if self.kind == "multinomial_logit":
            p0 = self.base_prob(phi, Kw)
            _guard_multinomial(e, p0)
            d = X - e
            return d / e + (d.sum(axis=1) / p0)[:, None]
        v = e * (1 - e) if self.kind == "bernoulli_logit" else e
        _guard_scalar(v)
        return (X - e) / v

    def instrument_jacobian_rows(self, phi, X, Kw):
        """Exact derivative of each row's instrument in phi, shape (N, K, dim_phi)."""
        X = as_2d(X, "treatments")
        n, L = Kw.shape
        e = self.probs(phi, Kw)
        if self.kind == "poisson_log":
            _guard_scalar(e)
            dz = -X[:, 0] / e[:, 0]
            return (dz[:, None] * Kw)[:, None, :]
        if self.kind == "bernoulli_logit":
            p, x = e[:, 0], X[:, 0]
            _guard_scalar(p * (1 - p))
            dz = -x * (1 - p) / p - (1 - x) * p / (1 - p)
            return (dz[:, None] * Kw)[:, None, :]
        K = self.n_categories
        p0 = self.base_prob(phi, Kw)
        _guard_multinomial(e, p0)
        x0 = 1.0 - X.sum(axis=1)
        # Z_k = x_k / p_k - x_0 / p_0 ; d log p_k / d eta_j = 1[k=j] - p_j
        r = X / e
        dz_deta = -r[:, :, None] * (np.eye(K)[None] - e[:, None, :]) - (x0 / p0)[:, None, None] * e[:, None, :]
        out = np.empty((n, K, L * K))
        for j in range(K):
            out[:, :, j * L:(j + 1) * L] = dz_deta[:, :, j, None] * Kw[:, None, :]
        return out


def _guard_scalar(v):
    bad = v.ravel() < VAR_EPS
    if bad.any():
        raise DegenerateVariance(
            f"conditional treatment variance {v.ravel()[bad][0]:.3g} at row {int(np.argmax(bad))} "
            "is numerically zero (overlap failure)"
        )


def _guard_multinomial(p, p0):
    low = np.minimum(p.min(axis=1), p0)
    bad = low <= VAR_EPS
    if bad.any():
        raise DegenerateVariance(
            f"category probability {low[bad][0]:.3g} at row {int(np.argmax(bad))} is numerically zero"
        )


def multinomial_vinv(p, p0=None):
    """Closed-form inverse of ``diag(p) - p p'`` for multinomial probabilities.

    ``p`` holds the ``K`` non-base probabilities and ``p0`` the base one
    (defaults to ``1 - sum(p)``). The inverse is ``diag(1/p) + 11'/p0``.
    """
    p = np.atleast_1d(np.asarray(p, dtype=float))
    if p0 is None:
        p0 = 1.0 - p.sum()
    if np.any(p <= VAR_EPS) or p0 <= VAR_EPS:
        raise DegenerateVariance("multinomial probability at or below 1e-12")
    if abs(p.sum() + p0 - 1.0) > 1e-8:
        raise ValueError("probabilities must sum to one")
    k = p.shape[0]
    return np.diag(1.0 / p) + np.ones((k, k)) / p0


@dataclass(frozen=True)
class GpsFit:
    family: GpsFamily
    phi_hat: np.ndarray
    loglik: float
    converged: bool
    iterations: int
    quasi_likelihood: bool = False

    @property
    def coef(self):
        """Coefficients as an (L, K) matrix."""
        return self.family._coef(self.phi_hat)

    def design(self, W):
        return self.family.design(W)

    def mean_var_rows(self, W):
        return self.family.mean_var_rows(self.phi_hat, self.design(W))

    def instrument_rows(self, X, W):
        return self.family.instrument_rows(self.phi_hat, X, self.design(W))

    def score_rows(self, X, W):
        return self.family.score_rows(self.phi_hat, X, self.design(W))


def fit_mle(family: GpsFamily, X, W, max_iter=100, tol=1e-10, max_halvings=50):
    """Maximum likelihood fit by Newton's method with step-halving from zero.

    Raises
    ------
    SupportViolation
        Treatments outside the family's support.
    Separation
        Fitted probabilities collapse to 0 or 1 (binary/multinomial).
    ConvergenceError
        Step-halving cannot improve the likelihood while the score is not small.
    """
    X = as_2d(X, "treatments")
    quasi = family.check_support(X)
    Kw = family.design(W)
    n = Kw.shape[0]
    phi = np.zeros(family.dim_phi)
    ll = family.loglik_rows(phi, X, Kw).mean()
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        g = family.score_rows(phi, X, Kw).mean(axis=0)
        if np.linalg.norm(g) < tol:
            converged = True
            it -= 1
            break
        try:
            step = -lu_solve_checked(family.hessian(phi, X, Kw), g, "GPS Hessian")
        except SingularSystem:
            _raise_if_separated(family, phi, Kw)
            raise
        t = 1.0
        for _ in range(max_halvings):
            cand = phi + t * step
            ll_c = family.loglik_rows(cand, X, Kw).mean()
            if np.isfinite(ll_c) and ll_c >= ll - 1e-13 * (1.0 + abs(ll)):
                break
            t /= 2
        else:
            if np.linalg.norm(g) < 1e-8:
                converged = True
                break
            _raise_if_separated(family, phi, Kw)
            raise ConvergenceError(f"{family.kind}: step-halving stalled at iteration {it}")
        phi, ll = cand, ll_c
    else:
        g = family.score_rows(phi, X, Kw).mean(axis=0)
        converged = bool(np.linalg.norm(g) < tol)
    # the score also vanishes along a separating direction, so check regardless
    _raise_if_separated(family, phi, Kw)
    if quasi:
        warnings.warn("Poisson treatment has non-integer values; fitting by quasi-likelihood", stacklevel=2)
    return GpsFit(family, phi, float(ll * n), converged, it, quasi)


def _raise_if_separated(family, phi, Kw):
    if family.kind == "poisson_log":
        return
    e = family.probs(phi, Kw)
    lo = e.min()
    hi = e.max() if family.kind == "bernoulli_logit" else 1 - family.base_prob(phi, Kw).min()
    if family.kind == "multinomial_logit":
        lo = min(lo, family.base_prob(phi, Kw).min())
    if lo < 1e-8 or hi > 1 - 1e-8:
        raise Separation(f"{family.kind}: fitted probabilities collapse to 0/1 (perfect separation)")


def mean_var(fit: GpsFit, w_row):
    """Conditional mean (K,) and variance (K, K) at one control row."""
    w = np.atleast_2d(np.asarray(w_row, dtype=float))
    if fit.family.basis.n_controls == 0:
        w = np.empty((1, 0))
    e, v = fit.mean_var_rows(w)
    return e[0], v[0]


def instrument(fit: GpsFit, x_row, w_row):
    w = np.atleast_2d(np.asarray(w_row, dtype=float))
    if fit.family.basis.n_controls == 0:
        w = np.empty((1, 0))
    x = np.atleast_2d(np.asarray(x_row, dtype=float))
    return fit.instrument_rows(x, w)[0]


def score_rows(fit: GpsFit, X, W):
    return fit.score_rows(X, W)


class GeneralizedPropensityScore(TransformerMixin, BaseEstimator):
    """Parametric generalized propensity score, sklearn style.

    ``fit(W, X)`` takes raw controls as features and the treatment as the
    target. ``predict`` returns the conditional mean ``e(W)``;
    ``transform(W, X)`` returns the instrument ``v(W)^{-1} (X - e(W))``.

    Parameters
    ----------
    family : {"logit", "poisson", "multinomial"} or a full family kind
    basis : BasisSpec, optional
        Basis ``k(W)``; defaults to a constant plus every control linearly.
    n_categories : int, optional
        Non-base categories for the multinomial family; inferred from ``X``.
    """

    def __init__(self, family="poisson", basis=None, n_categories=None, max_iter=100, tol=1e-10):
        self.family = family
        self.basis = basis
        self.n_categories = n_categories
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, W, X):
        W = as_2d(W, "controls") if np.ndim(W) else np.empty((np.shape(X)[0], 0))
        X = as_2d(X, "treatments")
        basis = self.basis if self.basis is not None else linear_basis(W.shape[1])
        k = self.n_categories or X.shape[1]
        self.family_ = GpsFamily(self.family, basis, k)
        self.fit_ = fit_mle(self.family_, X, W, max_iter=self.max_iter, tol=self.tol)
        self.coef_ = self.fit_.coef
        self.n_features_in_ = W.shape[1]
        return self

    def predict(self, W):
        return self.fit_.mean_var_rows(as_2d(W, "controls"))[0]

    def predict_var(self, W):
        return self.fit_.mean_var_rows(as_2d(W, "controls"))[1]

    def transform(self, W, X):
        return self.fit_.instrument_rows(as_2d(X, "treatments"), as_2d(W, "controls"))

    def fit_transform(self, W, X):
        return self.fit(W, X).transform(W, X)
