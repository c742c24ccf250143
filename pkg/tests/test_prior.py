import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, optimize, stats

from ebmix.core import GeneSummaries
from ebmix.prior import (PriorFitError, VariancePrior, fit_variance_prior,
                         fit_variance_prior_moments, marginal_log_density_m,
                         posterior_mean_variance, posterior_mode_variance, pooled_variance,
                         prior_loglik)


def _quad_marginal(m, f, alpha, beta):
    """Integrate chi-square(m | v) x inverse-gamma(v) over log v."""
    h = f / 2

    def integrand(u):
        v = np.exp(u)
        return (stats.gamma.pdf(m, h, scale=v / h) * stats.invgamma.pdf(v, alpha, scale=1 / beta)
                * v)

    mode = (m * h + 1 / beta) / (h + alpha + 1)
    width = min(12.0, 15 / np.sqrt(h + alpha))
    val, _ = integrate.quad(integrand, np.log(mode) - width, np.log(mode) + width, limit=400,
                            points=[np.log(mode)], epsabs=0, epsrel=1e-11)
    return val


@pytest.mark.parametrize("m, f, alpha, beta", [
    (0.2, 10, 5.0, 1 / 12), (1.7, 4, 2.1, 10 / 33), (0.05, 2, 3.0, 2.0), (3.0, 30, 8.0, 0.05),
])
def test_marginal_density_matches_quadrature(m, f, alpha, beta):
    closed = np.exp(marginal_log_density_m(m, f, alpha=alpha, beta=beta))
    assert closed == pytest.approx(_quad_marginal(m, f, alpha, beta), rel=1e-8)


def test_marginal_density_integrates_to_one():
    val, _ = integrate.quad(lambda m: np.exp(marginal_log_density_m(m, 6, alpha=3, beta=0.5)),
                            0, np.inf, limit=200)
    assert val == pytest.approx(1.0, abs=1e-8)


def test_marginal_density_at_zero():
    assert marginal_log_density_m(0.0, 6, alpha=3, beta=1) == -np.inf
    assert marginal_log_density_m(0.0, 1, alpha=3, beta=1) == np.inf
    assert np.isfinite(marginal_log_density_m(0.0, 2, alpha=3, beta=1))


def _draw(seed, G=4000, f=10, alpha=5.0, beta=1 / 12):
    rng = np.random.default_rng(seed)
    s2 = 1 / rng.gamma(alpha, beta, G)
    m = s2 * rng.chisquare(f, G) / f
    return GeneSummaries(d=np.zeros(G), m=m, f=f, n1=6, n2=6)


def test_ml_fit_matches_generic_optimizer():
    s = _draw(1)
    fitted = fit_variance_prior(s)

    def nll(theta):
        return -prior_loglik(s, *np.exp(theta))

    ref = optimize.minimize(nll, np.log([3.0, 0.2]), method="Nelder-Mead",
                            options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 5000})
    assert fitted.alpha == pytest.approx(np.exp(ref.x[0]), rel=1e-4)
    assert fitted.beta == pytest.approx(np.exp(ref.x[1]), rel=1e-4)


def test_ml_fit_recovers_truth():
    fitted = fit_variance_prior(_draw(2, G=20000))
    assert fitted.alpha == pytest.approx(5.0, rel=0.1)
    assert fitted.beta == pytest.approx(1 / 12, rel=0.1)


def test_moment_estimates_recover_truth():
    fitted = fit_variance_prior_moments(_draw(3, G=50000, alpha=8.0, beta=0.05))
    assert fitted.method == "moments"
    assert fitted.alpha == pytest.approx(8.0, rel=0.15)
    assert fitted.beta == pytest.approx(0.05, rel=0.15)


def test_moment_estimates_invert_population_moments():
    # m values whose first two sample moments equal the population ones
    alpha, beta, f = 6.0, 0.1, 8
    e1 = 1 / ((alpha - 1) * beta)
    e2 = e1**2 * (alpha - 1) / (alpha - 2) * (1 + 2 / f)
    spread = np.sqrt(e2 - e1**2)
    m = np.r_[np.full(10, e1 - spread), np.full(10, e1 + spread)]
    fitted = fit_variance_prior_moments(GeneSummaries(d=np.zeros(20), m=m, f=f, n1=5, n2=5))
    assert fitted.alpha == pytest.approx(alpha, rel=1e-12)
    assert fitted.beta == pytest.approx(beta, rel=1e-12)


def test_prior_fit_needs_enough_genes():
    s = GeneSummaries(d=np.zeros(5), m=np.ones(5), f=4, n1=3, n2=3)
    with pytest.raises(PriorFitError):
        fit_variance_prior(s)


def test_zero_m_genes_are_excluded_with_warning():
    s = _draw(5, G=200)
    m = s.m.copy()
    m[:3] = 0.0
    s0 = GeneSummaries(d=s.d, m=m, f=s.f, n1=6, n2=6)
    with pytest.warns(UserWarning, match="3 gene"):
        p = fit_variance_prior(s0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        p_ref = fit_variance_prior(s0.take(np.arange(3, 200)))
    assert p.alpha == pytest.approx(p_ref.alpha, rel=1e-6)


def test_posterior_mode_is_argmax_of_posterior():
    prior = VariancePrior(4.0, 0.3)
    m, f = 0.8, 6
    h = f / 2

    def neg_log_post(v):
        return -(stats.gamma.logpdf(m, h, scale=v / h)
                 + stats.invgamma.logpdf(v, prior.alpha, scale=1 / prior.beta))

    res = optimize.minimize_scalar(neg_log_post, bounds=(1e-4, 20), method="bounded",
                                   options={"xatol": 1e-12})
    assert posterior_mode_variance(m, f, prior) == pytest.approx(res.x, rel=1e-6)


def test_posterior_mean_matches_quadrature():
    prior = VariancePrior(4.0, 0.3)
    m, f = 0.8, 6
    h = f / 2
    post = stats.invgamma(h + prior.alpha, scale=m * h + 1 / prior.beta)
    assert posterior_mean_variance(m, f, prior) == pytest.approx(post.mean(), rel=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-6, 1e3), st.integers(1, 60), st.floats(0.1, 50), st.floats(1e-3, 1e3))
def test_posterior_mode_is_a_convex_blend(m, f, alpha, beta):
    prior = VariancePrior(alpha, beta)
    v = posterior_mode_variance(m, f, prior)
    lo, hi = min(m, prior.mode), max(m, prior.mode)
    assert lo * (1 - 1e-12) <= v <= hi * (1 + 1e-12)


def test_pooled_variance_is_df_weighted():
    s = GeneSummaries(d=[0, 0], m=[1.0, 4.0], f=[2, 6], n1=[2, 4], n2=[2, 4])
    assert pooled_variance(s) == pytest.approx((2 + 24) / 8)


def test_prior_validation():
    with pytest.raises(ValueError):
        VariancePrior(-1.0, 1.0)
    with pytest.raises(ValueError):
        VariancePrior(1.5, 1.0, "moments")
    assert VariancePrior(5.0, 1 / 12).mode == pytest.approx(2.0)
