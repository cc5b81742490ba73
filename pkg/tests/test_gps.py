import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit, logit
from sklearn.base import clone

from clpest.basis import constant_basis, linear_basis, polynomial_basis
from clpest.exceptions import DegenerateVariance, Separation, SupportViolation
from clpest.gps import (
    GeneralizedPropensityScore,
    GpsFamily,
    fit_mle,
    instrument,
    mean_var,
    multinomial_vinv,
    score_rows,
)
from clpest.mom import MomentSystem, numeric_jacobian
from clpest.rng import stream
from clpest.simulate import DESIGNS, draw_sample


def _multinomial_data(n, seed, K=2):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=n)
    eta = np.column_stack([0.3 * (k + 1) - 0.5 * (k - 0.5) * w for k in range(K)])
    full = np.column_stack([np.zeros(n), eta])
    p = np.exp(full - full.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    labels = np.array([rng.choice(K + 1, p=row) for row in p])
    X = np.zeros((n, K))
    X[labels > 0, labels[labels > 0] - 1] = 1
    return X, w[:, None]


def _family_data(kind, n=300, seed=0):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=n)
    if kind == "poisson_log":
        X = rng.poisson(np.exp(0.2 + 0.4 * w)).astype(float)[:, None]
        return GpsFamily(kind, polynomial_basis(1, 2)), X, w[:, None]
    if kind == "bernoulli_logit":
        X = (rng.uniform(size=n) < expit(-0.3 + 0.8 * w)).astype(float)[:, None]
        return GpsFamily(kind, polynomial_basis(1, 2)), X, w[:, None]
    X, W = _multinomial_data(n, seed)
    return GpsFamily(kind, linear_basis(1), 2), X, W


FAMILIES = ("poisson_log", "bernoulli_logit", "multinomial_logit")


def test_poisson_constant_closed_form():
    fit = fit_mle(GpsFamily("poisson", constant_basis()), [1.0, 2.0, 3.0], np.empty((3, 0)))
    assert fit.converged
    assert fit.phi_hat[0] == pytest.approx(np.log(2.0), abs=1e-12)


def test_bernoulli_constant_closed_form():
    X = np.array([1.0, 0, 0, 0, 1, 0, 0, 0])
    fit = fit_mle(GpsFamily("logit", constant_basis()), X, np.empty((8, 0)))
    assert fit.phi_hat[0] == pytest.approx(logit(0.25), abs=1e-12)


def test_design1_mle_consistent():
    data = draw_sample(DESIGNS[1], 100_000, stream(123, 0))
    fit = fit_mle(GpsFamily("poisson", linear_basis(1)), data.X, data.W)
    assert fit.converged
    np.testing.assert_allclose(fit.phi_hat, [0.1, 0.5], atol=0.02)
    g = score_rows(fit, data.X, data.W).mean(axis=0)
    assert np.linalg.norm(g) < 1e-8


@pytest.mark.parametrize("kind", FAMILIES)
def test_first_order_condition(kind):
    fam, X, W = _family_data(kind)
    fit = fit_mle(fam, X, W)
    assert fit.converged and np.isfinite(fit.loglik)
    assert np.linalg.norm(fit.score_rows(X, W).mean(axis=0)) < 1e-8


def test_mean_var_examples():
    w0 = np.empty(0)
    pois = fit_mle(GpsFamily("poisson", constant_basis()), [0.0, 1.0, 2.0, 1.0], np.empty((4, 0)))
    e, v = mean_var(pois, w0)  # mean 1 -> index 0
    assert e[0] == pytest.approx(1.0) and v[0, 0] == pytest.approx(1.0)
    bern = fit_mle(GpsFamily("logit", constant_basis()), [0.0, 1.0], np.empty((2, 0)))
    e, v = mean_var(bern, w0)
    assert e[0] == pytest.approx(0.5) and v[0, 0] == pytest.approx(0.25)


def test_multinomial_mean_var_zero_logits():
    fam = GpsFamily("multinomial", constant_basis(), 2)
    Kw = np.ones((1, 1))
    e, v = fam.mean_var_rows(np.zeros(2), Kw)
    np.testing.assert_allclose(e[0], [1 / 3, 1 / 3], atol=1e-15)
    expected = np.diag([1 / 3, 1 / 3]) - np.full((2, 2), 1 / 9)
    np.testing.assert_allclose(v[0], expected, atol=1e-15)


def _bernoulli_fit_with_mean(e):
    # constant-only logit fit whose fitted probability is exactly e = a/b
    from fractions import Fraction

    f = Fraction(e).limit_denominator(100)
    X = np.r_[np.ones(f.numerator), np.zeros(f.denominator - f.numerator)]
    return fit_mle(GpsFamily("logit", constant_basis()), X, np.empty((len(X), 0)))


def test_binary_instrument_examples():
    half = _bernoulli_fit_with_mean(0.5)
    assert instrument(half, [1.0], []) == pytest.approx([2.0])
    assert instrument(half, [0.0], []) == pytest.approx([-2.0])
    quarter = _bernoulli_fit_with_mean(0.25)
    assert instrument(quarter, [1.0], []) == pytest.approx([4.0])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_binary_instrument_is_ipw_contrast(seed):
    fam, X, W = _family_data("bernoulli_logit", n=200, seed=seed)
    fit = fit_mle(fam, X, W)
    e = fit.mean_var_rows(W)[0][:, 0]
    x = X[:, 0]
    np.testing.assert_allclose(fit.instrument_rows(X, W)[:, 0], x / e - (1 - x) / (1 - e), rtol=1e-12)


def test_multinomial_vinv_binary_reduction():
    e = 0.3
    assert multinomial_vinv([e])[0, 0] == pytest.approx(1 / (e * (1 - e)))


def test_multinomial_vinv_k2():
    vinv = multinomial_vinv([1 / 3, 1 / 3])
    np.testing.assert_allclose(vinv, np.diag([3.0, 3.0]) + 3.0 * np.ones((2, 2)), atol=1e-12)
    v = np.diag([1 / 3, 1 / 3]) - np.full((2, 2), 1 / 9)
    np.testing.assert_allclose(vinv @ v, np.eye(2), atol=1e-12)


def test_multinomial_vinv_random_simplex():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        K = rng.integers(1, 6)
        full = rng.dirichlet(np.ones(K + 1))
        p, p0 = full[1:], full[0]
        v = np.diag(p) - np.outer(p, p)
        vinv = multinomial_vinv(p, p0)
        np.testing.assert_allclose(vinv @ v, np.eye(K), atol=1e-10)
        np.testing.assert_allclose(vinv, np.linalg.inv(v), rtol=1e-8)


def test_multinomial_vinv_degenerate():
    with pytest.raises(DegenerateVariance):
        multinomial_vinv([1e-13, 0.5])


def test_multinomial_instrument_matches_solve():
    X, W = _multinomial_data(400, 3)
    fit = fit_mle(GpsFamily("multinomial", linear_basis(1), 2), X, W)
    Z = fit.instrument_rows(X, W)
    e, v = fit.mean_var_rows(W)
    direct = np.stack([np.linalg.solve(v[i], X[i] - e[i]) for i in range(len(X))])
    np.testing.assert_allclose(Z, direct, atol=1e-10)


@pytest.mark.parametrize("kind", FAMILIES)
def test_scores_match_finite_differences(kind):
    fam, X, W = _family_data(kind, n=50, seed=2)
    Kw = fam.design(W)
    phi = np.random.default_rng(0).normal(scale=0.3, size=fam.dim_phi)
    S = fam.score_rows(phi, X, Kw)
    fd = np.empty_like(S)
    for j in range(fam.dim_phi):
        h = 1e-6 * max(1.0, abs(phi[j]))
        up, dn = phi.copy(), phi.copy()
        up[j] += h
        dn[j] -= h
        fd[:, j] = (fam.loglik_rows(up, X, Kw) - fam.loglik_rows(dn, X, Kw)) / (2 * h)
    np.testing.assert_allclose(S, fd, rtol=1e-6, atol=1e-8)


@pytest.mark.parametrize("kind", FAMILIES)
def test_hessian_matches_numeric_jacobian_of_score(kind):
    fam, X, W = _family_data(kind)
    fit = fit_mle(fam, X, W)
    Kw = fam.design(W)
    sys_ = MomentSystem(lambda data, phi: fam.score_rows(phi, X, Kw), fam.dim_phi)
    num = numeric_jacobian(sys_, None, fit.phi_hat)
    ana = fam.hessian(fit.phi_hat, X, Kw)
    np.testing.assert_allclose(ana, num, rtol=1e-4, atol=1e-8)


@pytest.mark.parametrize("kind", FAMILIES)
def test_instrument_jacobian_matches_finite_differences(kind):
    fam, X, W = _family_data(kind, n=60, seed=4)
    Kw = fam.design(W)
    phi = fit_mle(fam, X, W).phi_hat
    ana = fam.instrument_jacobian_rows(phi, X, Kw)
    for j in range(fam.dim_phi):
        h = 1e-6
        up, dn = phi.copy(), phi.copy()
        up[j] += h
        dn[j] -= h
        fd = (fam.instrument_rows(up, X, Kw) - fam.instrument_rows(dn, X, Kw)) / (2 * h)
        np.testing.assert_allclose(ana[:, :, j], fd, rtol=1e-5, atol=1e-7)


def test_support_violations():
    W = np.zeros((3, 0))
    with pytest.raises(SupportViolation):
        fit_mle(GpsFamily("logit", constant_basis()), [0.0, 2.0, 1.0], W)
    with pytest.raises(SupportViolation):
        fit_mle(GpsFamily("poisson", constant_basis()), [0.0, -1.0, 1.0], W)
    with pytest.raises(SupportViolation):
        fit_mle(GpsFamily("multinomial", constant_basis(), 2), [[1.0, 1.0], [0, 0], [0, 1]], W)


def test_poisson_non_integer_warns():
    with pytest.warns(UserWarning, match="quasi"):
        fit = fit_mle(GpsFamily("poisson", constant_basis()), [0.5, 1.5, 2.5], np.empty((3, 0)))
    assert fit.quasi_likelihood
    assert fit.phi_hat[0] == pytest.approx(np.log(1.5))


def test_perfect_separation():
    w = np.array([-3.0, -2.0, -1.0, 1.0, 2.0, 3.0])[:, None]
    x = (w[:, 0] > 0).astype(float)
    with pytest.raises(Separation):
        fit_mle(GpsFamily("logit", linear_basis(1)), x, w)


def test_degenerate_variance_guard():
    fam = GpsFamily("poisson", linear_basis(1))
    with pytest.raises(DegenerateVariance):
        fam.instrument_rows(np.array([0.0, 40.0]), np.array([[1.0]]), np.array([[1.0, -1.0]]))


def test_instrument_mean_shrinks_at_root_n():
    # at the true phi the sample mean of Z is O(N^{-1/2}); compare RMS over replications
    design = DESIGNS[1]
    fam = GpsFamily("poisson", linear_basis(1))
    phi0 = np.array([design.phi0, design.phi1])

    def rms(n, reps=200):
        vals = []
        for r in range(reps):
            d = draw_sample(design, n, stream(99, r + 1000 * n))
            vals.append(fam.instrument_rows(phi0, d.X, fam.design(d.W)).mean())
        return np.sqrt(np.mean(np.square(vals)))

    ratio = rms(100_000) / rms(10_000)
    assert 0.25 <= ratio <= 0.75


def test_sklearn_wrapper():
    fam, X, W = _family_data("poisson_log")
    est = GeneralizedPropensityScore("poisson", basis=fam.basis)
    assert clone(est).get_params()["family"] == "poisson"
    Z = est.fit_transform(W, X)
    np.testing.assert_allclose(Z, fit_mle(fam, X, W).instrument_rows(X, W))
    assert est.predict(W).shape == (len(X), 1)
    assert est.predict_var(W).shape == (len(X), 1, 1)
