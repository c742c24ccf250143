import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp
from scipy import stats
from statsmodels.stats.multitest import multipletests

from conftest import simulate_summaries
from ebmix import em, inference
from ebmix.core import GeneSummaries
from ebmix.em import EmConfig, MixtureParams
from ebmix.inference import DecisionConfig, bh_procedure
from ebmix.prior import VariancePrior

PRIOR = VariancePrior(5.0, 1 / 12)


def _fit_at(s, params, kind="RR"):
    return em.fit_at(s, PRIOR, params, kind)


def test_lr_identity_with_direct_densities():
    s, _ = simulate_summaries(seed=1, G=1000)
    fit = _fit_at(s, MixtureParams(p1=0.05, tau=0.1, psi=3.0, sigma_psi2=1.0))
    lr = inference.likelihood_ratio(s, fit)
    var0, var1 = fit.null_variance, fit.nonnull_variance
    direct = (stats.norm.pdf(s.d, 0.1, np.sqrt(var0))
              / stats.norm.pdf(s.d, 3.1, np.sqrt(var1)))
    np.testing.assert_allclose(lr.lr, direct, rtol=1e-10)
    np.testing.assert_allclose(inference.lr_posterior_form(s, fit), direct, rtol=1e-10)


def test_lr_posterior_form_at_half_shrinkage():
    # var0 = 1 and sigma_psi2 = 1 give lam = 0.5
    s = GeneSummaries(d=[0.0, 1.0, 3.0], m=1.0, f=4, n1=[2] * 3, n2=[2] * 3)
    fit = em.fit_at(s, None, MixtureParams(p1=0.1, tau=0.0, psi=2.0, sigma_psi2=1.0), "RF")
    lr = inference.likelihood_ratio(s, fit)
    np.testing.assert_allclose(lr.lam, 0.5)
    t = (0.5 * s.d + 0.5 * 2.0) / np.sqrt(0.5)
    np.testing.assert_allclose(lr.t_post, t, rtol=1e-14)
    np.testing.assert_allclose(lr.lr, np.sqrt(2) * np.exp(-t**2 / 2 + 2.0), rtol=1e-12)


def test_rg_shrinkage_is_common_to_all_genes():
    s, _ = simulate_summaries(seed=2, G=200)
    fit = _fit_at(s, MixtureParams(p1=0.05, tau=0.0, psi=3.0, v0=1.5), "RG")
    lam = inference.likelihood_ratio(s, fit).lam
    np.testing.assert_allclose(lam, 1.5 / (1.5 + 2 / 6), rtol=1e-13)


def test_t_post_falls_back_at_zero_spread():
    s, _ = simulate_summaries(seed=3, G=50)
    fit = _fit_at(s, MixtureParams(p1=0.05, tau=0.2, psi=3.0, sigma_psi2=0.0))
    lr = inference.likelihood_ratio(s, fit)
    np.testing.assert_allclose(lr.t_post, (s.d - 0.2) / np.sqrt(fit.null_variance))
    assert np.all(lr.lam == 0)
    with pytest.raises(ValueError):
        inference.lr_posterior_form(s, fit)


def test_three_group_ratio_uses_both_components():
    s, _ = simulate_summaries(seed=4, G=300, p1=0.05, p2=0.05)
    params = MixtureParams(p1=0.06, p2=0.04, tau=0.0, psi=2.5, sigma_psi2=1.0)
    fit = _fit_at(s, params)
    lr = inference.likelihood_ratio(s, fit)
    var0, var1 = fit.null_variance, fit.nonnull_variance
    f1 = (0.6 * stats.norm.pdf(s.d, 2.5, np.sqrt(var1))
          + 0.4 * stats.norm.pdf(s.d, -2.5, np.sqrt(var1)))
    np.testing.assert_allclose(lr.lr, stats.norm.pdf(s.d, 0, np.sqrt(var0)) / f1, rtol=1e-10)
    # local f.d.r. agrees with the ratio: lfdr = p0 lr / (p0 lr + p1 + p2)
    lfdr = 0.9 * lr.lr / (0.9 * lr.lr + 0.1)
    np.testing.assert_allclose(fit.local_fdr, lfdr, rtol=1e-10, atol=1e-14)
    neg = s.d < -1.5
    assert np.all(lr.t_post[neg] < 0)


def test_fixed_effect_statistics():
    s, _ = simulate_summaries(seed=5, G=100)
    ff = inference.fixed_effect_statistic(s, None, "FF", tau=0.0)
    np.testing.assert_allclose(ff, s.d / np.sqrt(s.m * s.scale))
    fh = inference.fixed_effect_statistic(s, None, "FH")
    pooled = np.sum(s.m * s.f) / np.sum(s.f)
    np.testing.assert_allclose(fh, (s.d - np.median(s.d)) / np.sqrt(pooled * s.scale))
    with pytest.raises(ValueError):
        inference.fixed_effect_statistic(s, PRIOR, "RR")


def test_pvalue_at_the_two_sided_five_percent_point():
    s = GeneSummaries(d=[1.959963984540054, 0.0], m=1.0, f=4, n1=2, n2=2)
    fit = em.fit_at(s, None, MixtureParams(p1=0.1, tau=0.0, psi=2.0, sigma_psi2=1.0), "RF")
    p = inference.theoretical_null_pvalues(s, fit)
    assert p[0] == pytest.approx(0.05, rel=1e-12)
    assert p[1] == 1.0


def test_pvalues_are_uniform_under_the_null():
    rng = np.random.default_rng(6)
    G = 5000
    s2 = 1 / rng.gamma(5.0, 1 / 12, G)
    d = rng.normal(0, np.sqrt(s2 / 3))
    s = GeneSummaries(d=d, m=s2, f=10, n1=6, n2=6)  # m equal to sigma^2: exact null
    fit = em.fit_at(s, None, MixtureParams(p1=0.0, tau=0.0, psi=1.0, sigma_psi2=1.0), "RF")
    p = inference.theoretical_null_pvalues(s, fit)
    assert stats.kstest(p, "uniform").pvalue > 0.01


def test_bh_hand_example():
    calls, adj = bh_procedure([0.001, 0.008, 0.039, 0.041, 0.9], 0.05)
    # p(2) = 0.008 <= 0.02 but p(3) = 0.039 > 0.03 and p(4) = 0.041 > 0.04
    assert calls.tolist() == [True, True, False, False, False]
    np.testing.assert_allclose(adj, [0.005, 0.02, 0.05125, 0.05125, 0.9])


def test_bh_ties_at_cutoff_are_all_called():
    calls, _ = bh_procedure([0.01, 0.02, 0.02, 0.5], 0.1)
    assert calls.tolist() == [True, True, True, False]


@settings(max_examples=200, deadline=None)
@given(hnp.arrays(float, st.integers(1, 60), elements=st.floats(0, 1)),
       st.floats(0.001, 0.5))
def test_bh_matches_statsmodels(p, q):
    calls, adj = bh_procedure(p, q)
    ref_calls, ref_adj, _, _ = multipletests(p, alpha=q, method="fdr_bh")
    np.testing.assert_allclose(adj, ref_adj, rtol=1e-12, atol=1e-15)
    # statsmodels compares adjusted p-values with q, which can differ from the
    # step-up comparison only through rounding at the boundary
    boundary = np.isclose(adj, q, rtol=1e-12)
    np.testing.assert_array_equal(calls[~boundary], ref_calls[~boundary])


@settings(max_examples=200, deadline=None)
@given(hnp.arrays(float, st.integers(1, 60), elements=st.floats(0, 1)),
       st.floats(0.001, 0.5))
def test_bh_properties(p, q):
    calls, adj = bh_procedure(p, q)
    bonferroni = p <= q / p.size
    assert np.all(calls[bonferroni])
    order = np.argsort(p, kind="stable")
    assert np.all(np.diff(adj[order]) >= 0)
    assert np.all(adj >= p - 1e-15) and np.all(adj <= 1)
    if calls.any():
        assert p[calls].max() <= p[~calls].min() if (~calls).any() else True


def test_bh_edge_cases():
    calls, adj = bh_procedure([], 0.05)
    assert calls.size == 0 and adj.size == 0
    assert not bh_procedure([0.001, 0.2], 0.0)[0].any()
    with pytest.raises(ValueError):
        bh_procedure([1.2], 0.05)


def test_decide_and_thresholds(lemma_data):
    s, truth = lemma_data
    fit = em.fit(s, PRIOR, "RR")
    loose = inference.decide(s, fit, DecisionConfig(local_fdr_threshold=0.5))
    strict = inference.decide(s, fit, DecisionConfig(local_fdr_threshold=0.05))
    assert np.all(loose.call_local[strict.call_local])
    none = inference.decide(s, fit, DecisionConfig(local_fdr_threshold=0.0, fdr_level=0.0))
    assert none.n_local == 0 and none.n_fdr == 0
    big = inference.decide(s, fit, DecisionConfig(min_abs_effect=np.inf))
    assert big.n_local == 0 and big.n_fdr == 0
    assert len(loose) == len(s) and loose.gene_ids == s.gene_ids
    assert strict.n_local >= 0.3 * truth.sum()
    with pytest.raises(ValueError):
        DecisionConfig(local_fdr_threshold=1.5)


def test_local_fdr_calls_are_monotone_in_threshold(lemma_data):
    s, _ = lemma_data
    fit = em.fit(s, PRIOR, "RR", EmConfig())
    counts = [inference.classify_local_fdr(fit, DecisionConfig(c)).sum()
              for c in np.linspace(0, 1, 21)]
    assert np.all(np.diff(counts) >= 0)


def test_three_group_ratio_with_an_empty_component():
    s, _ = simulate_summaries(seed=9, G=100)
    # p1 / (p1 + p2) rounds to 1, so the second component carries no weight
    fit = _fit_at(s, MixtureParams(p1=0.1, p2=1e-300, tau=0.0, psi=2.0, sigma_psi2=1.0))
    assert fit.components == 3
    lr = inference.likelihood_ratio(s, fit)
    direct = (stats.norm.pdf(s.d, 0, np.sqrt(fit.null_variance))
              / stats.norm.pdf(s.d, 2.0, np.sqrt(fit.nonnull_variance)))
    np.testing.assert_allclose(lr.lr, direct, rtol=1e-10)


@pytest.mark.parametrize("kind", ["RR", "RF", "RH"])
def test_t_null_pvalues_are_exactly_uniform(kind):
    rng = np.random.default_rng(11)
    G, f = 20000, 6
    prior = VariancePrior(5.0, 1 / 12)
    s2 = 1 / rng.gamma(prior.alpha, prior.beta, G) if kind != "RH" else np.full(G, 2.0)
    d = rng.normal(0.3, np.sqrt(s2 / 2))
    m = s2 * rng.chisquare(f, G) / f
    s = GeneSummaries(d=d, m=m, f=f, n1=4, n2=4)
    fit = em.fit_at(s, prior, MixtureParams(p1=0.0, tau=0.3, psi=1.0, sigma_psi2=1.0), kind)
    p_t = inference.theoretical_null_pvalues(s, fit, "t")
    assert stats.kstest(p_t, "uniform").pvalue > 0.01
    if kind != "RH":
        # the plug-in normal reference is too light-tailed at f = 6
        p_n = inference.theoretical_null_pvalues(s, fit, "normal")
        assert np.mean(p_n < 0.01) > 2 * np.mean(p_t < 0.01)


def test_null_distribution_option():
    with pytest.raises(ValueError):
        DecisionConfig(null_distribution="cauchy")
    s, _ = simulate_summaries(seed=12, G=200)
    fit = _fit_at(s, MixtureParams(p1=0.05, tau=0.0, psi=3.0, sigma_psi2=1.0))
    table = inference.decide(s, fit, DecisionConfig(null_distribution="t"))
    np.testing.assert_array_equal(table.p_value, inference.theoretical_null_pvalues(s, fit, "t"))
    with pytest.raises(ValueError):
        inference.theoretical_null_pvalues(s, fit, "cauchy")
