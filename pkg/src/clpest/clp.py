"""Conditional-linear-predictor utilities.

* :class:`ClpBasis` and :func:`build_R` construct the working-model
  regressors ``R = (1, (k(W) - mu)', ((k(W) - mu) kron X)')'``.
* :func:`brute_force_clp` computes cell-by-cell CLP coefficients on discrete
  controls; it is the oracle the estimators are checked against.
* :func:`seb_monte_carlo` integrates the efficiency bound
  ``E[Omega(W)] + Var(b(W))`` for a simulation design.
* :func:`derivative_weights` evaluates the weights that express the average
  slope as a weighted average derivative for scalar continuous treatments.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.integrate import cumulative_trapezoid, trapezoid

from .basis import BasisSpec
from .data import as_2d, check_arrays
from .exceptions import CellTooSmall, ConfigError, NegativeDensity
from .rng import stream


@dataclass(frozen=True)
class ClpBasis:
    """Working-model basis for the CLP coefficients.

    ``basis`` must not contain the constant, which ``R`` always carries.
    ``mu_hat`` is the sample mean of the evaluated basis; use :meth:`fitted`
    to set it from a dataset.
    """

    basis: BasisSpec
    include_interactions: bool = True
    mu_hat: np.ndarray | None = None

    def __post_init__(self):
        if self.basis.has_constant:
            raise ConfigError("CLP basis must not include the constant term")

    @property
    def J(self):
        return len(self.basis)

    def dim_R(self, k):
        return 1 + self.J + (self.J * k if self.include_interactions else 0)

    def fitted(self, W):
        kw = self.basis.evaluate(W)
        mu = kw.mean(axis=0) if kw.shape[1] else np.zeros(0)
        return replace(self, mu_hat=mu)

    def centered(self, W, mu=None):
        mu = self.mu_hat if mu is None else mu
        if mu is None:
            raise ConfigError("mu_hat not set; call fitted() on the estimation sample first")
        return self.basis.evaluate(W) - mu


def build_R_rows(Wc, X, include_interactions=True):
    """Stack ``[1, Wc, Wc kron X]`` row by row. ``Wc`` is the centered basis (N, J)."""
    Wc = as_2d(Wc, "centered basis")
    X = as_2d(X, "treatments")
    n = X.shape[0]
    if Wc.shape[0] != n:
        Wc = np.zeros((n, 0)) if Wc.size == 0 else Wc
    blocks = [np.ones((n, 1)), Wc]
    if include_interactions:
        blocks.append((Wc[:, :, None] * X[:, None, :]).reshape(n, -1))
    return np.concatenate(blocks, axis=1)


def build_R(clp: ClpBasis, w_row, x_row):
    """R for a single observation, ordered [constant, centered terms, interactions]."""
    w = np.atleast_2d(np.asarray(w_row, dtype=float))
    wc = clp.centered(w)
    return build_R_rows(wc, np.atleast_2d(np.asarray(x_row, dtype=float)), clp.include_interactions)[0]


@dataclass(frozen=True)
class BruteForceClp:
    cells: np.ndarray
    counts: np.ndarray
    a: np.ndarray
    b: np.ndarray
    beta: np.ndarray


def brute_force_clp(y, X, W):
    """Cell-by-cell OLS of ``y`` on ``(1, X)`` over the distinct rows of ``W``.

    ``beta`` is the cell-frequency weighted average of the cell slopes.
    """
    y, X, W = check_arrays(y, X, W)
    k = X.shape[1]
    cells, inverse, counts = np.unique(W, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    a = np.empty(len(cells))
    b = np.empty((len(cells), k))
    for c in range(len(cells)):
        rows = inverse == c
        if counts[c] < k + 2:
            raise CellTooSmall(f"cell {cells[c].tolist()} has {counts[c]} rows, needs at least {k + 2}")
        D = np.column_stack([np.ones(counts[c]), X[rows]])
        if np.linalg.matrix_rank(D) < k + 1:
            raise CellTooSmall(f"treatment does not vary within cell {cells[c].tolist()}")
        coef = np.linalg.lstsq(D, y[rows], rcond=None)[0]
        a[c], b[c] = coef[0], coef[1:]
    beta = counts @ b / counts.sum()
    return BruteForceClp(cells, counts, a, b, beta)


@dataclass(frozen=True)
class SebResult:
    bound_inv: np.ndarray
    omega_term: np.ndarray
    var_b_term: np.ndarray
    n_draws: int

    def __post_init__(self):
        assert np.array_equal(self.bound_inv, self.omega_term + self.var_b_term)

    def se_at(self, n):
        """Bound-implied standard error of the average slope at sample size ``n``."""
        return np.sqrt(np.diag(self.bound_inv) / n)


def seb_monte_carlo(design, n_draws=1_000_000, seed=0, method="conditional", shard_size=100_000):
    """Monte Carlo integration of the efficiency bound for a design.

    ``design`` must provide ``draw_controls(n, rng)``, ``treatment_mean_var(W)``,
    ``b0(W)`` and ``sigma_u``; when ``method="joint"`` it also needs
    ``draw_treatment(W, rng)``.

    With ``method="conditional"`` only the controls are simulated and the inner
    expectation over ``(X, U)`` uses ``E[Omega | W] = sigma_u^2 v(W)^{-1}``,
    which holds because the noise is independent and homoskedastic. With
    ``method="joint"`` the full ``(W, X, U)`` law is simulated.

    Draws are generated in shards, each from its own counter-based stream,
    and accumulated in shard order.
    """
    if method not in ("conditional", "joint"):
        raise ConfigError(f"unknown SEB method {method!r}")
    n_shards = -(-n_draws // shard_size)
    s_omega = 0.0
    s_b = 0.0
    s_bb = 0.0
    for s in range(n_shards):
        m = min(shard_size, n_draws - s * shard_size)
        rng = stream(seed, s)
        W = design.draw_controls(m, rng)
        e, v = design.treatment_mean_var(W)
        if method == "conditional":
            omega = design.sigma_u**2 / v
        else:
            X = design.draw_treatment(W, rng)
            U = design.sigma_u * rng.standard_normal(m)
            omega = ((X - e) / v * U) ** 2
        b = design.b0(W)
        s_omega += omega.sum()
        s_b += b.sum()
        s_bb += (b * b).sum()
    omega_term = np.atleast_2d(s_omega / n_draws)
    mean_b = s_b / n_draws
    var_b = np.atleast_2d(max(s_bb / n_draws - mean_b**2, 0.0))
    return SebResult(omega_term + var_b, omega_term, var_b, n_draws)


@dataclass(frozen=True)
class DerivativeWeights:
    grid: np.ndarray
    omega: np.ndarray
    density: np.ndarray
    denominator: float
    mean: float

    def integrate(self, values):
        """Trapezoid integral of ``omega * values * density`` over the grid."""
        return trapezoid(self.omega * np.asarray(values, dtype=float) * self.density, self.grid)

    @property
    def mass(self):
        return self.integrate(np.ones_like(self.grid))


def derivative_weights(cond_density, e0, w, grid):
    """Weights omega(w, x) on a grid for a scalar continuous treatment.

    ``omega(w, x) = N(x) / (f(x|w) D)`` where
    ``N(x) = integral_x^xmax (t - e(w)) f(t|w) dt`` and ``D`` integrates ``N``
    over the support; ``D`` equals the conditional variance of the treatment.

    Parameters
    ----------
    cond_density : callable
        ``cond_density(x, w)`` returning f(x|w) on an array of x.
    e0 : callable or None
        Conditional mean ``e0(w)``; computed by quadrature when None.
    w : float
        Control value.
    grid : array
        Uniform grid over the treatment support.
    """
    grid = np.asarray(grid, dtype=float)
    f = np.asarray(cond_density(grid, w), dtype=float)
    if np.any(~np.isfinite(f)) or np.any(f <= 0):
        raise NegativeDensity("conditional density must be positive and finite on the grid")
    mean = trapezoid(grid * f, grid) / trapezoid(f, grid) if e0 is None else float(e0(w))
    g = (grid - mean) * f
    # N(x) = integral from x to the upper end
    tail = cumulative_trapezoid(g[::-1], -grid[::-1], initial=0.0)[::-1]
    denom = trapezoid(tail, grid)
    omega = tail / (f * denom)
    return DerivativeWeights(grid, omega, f, float(denom), float(mean))
