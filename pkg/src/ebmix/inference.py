"""Per-gene decisions from a fitted mixture.

Likelihood ratios and posterior t-statistics, local false discovery rate
calls, theoretical-null p-values and the Benjamini-Hochberg step-up rule.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special, stats

from .core import GeneSummaries, ModelKind
from .em import FitResult, error_variances
from .prior import VariancePrior

NULL_DISTRIBUTIONS = ("normal", "t")


@dataclass(frozen=True)
class DecisionConfig:
    """Thresholds for calling genes non-null.

    ``local_fdr_threshold`` and ``fdr_level`` may be 0, which calls nothing.
    ``min_abs_effect`` adds the filter ``|d_g - tau| >= min_abs_effect``.
    ``null_distribution`` selects the p-value reference, see
    :func:`theoretical_null_pvalues`.
    """

    local_fdr_threshold: float = 0.2
    fdr_level: float = 0.05
    min_abs_effect: float = 0.0
    null_distribution: str = "normal"

    def __post_init__(self):
        if not 0 <= self.local_fdr_threshold <= 1:
            raise ValueError("local_fdr_threshold must lie in [0, 1]")
        if not 0 <= self.fdr_level <= 1:
            raise ValueError("fdr_level must lie in [0, 1]")
        if not self.min_abs_effect >= 0:
            raise ValueError("min_abs_effect must be nonnegative")
        if self.null_distribution not in NULL_DISTRIBUTIONS:
            raise ValueError(f"null_distribution must be one of {NULL_DISTRIBUTIONS}")


@dataclass(frozen=True)
class GeneInference:
    """Per-gene inference table, in input gene order."""

    gene_ids: tuple
    lr: np.ndarray
    t_post: np.ndarray
    lam: np.ndarray
    local_fdr: np.ndarray
    p_value: np.ndarray
    bh_adjusted: np.ndarray
    call_local: np.ndarray
    call_fdr: np.ndarray

    def __len__(self):
        return self.lr.size

    @property
    def n_local(self) -> int:
        return int(self.call_local.sum())

    @property
    def n_fdr(self) -> int:
        return int(self.call_fdr.sum())


@dataclass(frozen=True)
class LikelihoodRatio:
    """``lr = f0/f1`` per gene with the posterior t-statistic and shrinkage weight."""

    lr: np.ndarray
    log_lr: np.ndarray
    t_post: np.ndarray
    lam: np.ndarray


def _null_sd(fit: FitResult) -> np.ndarray:
    return np.sqrt(fit.null_variance)


def likelihood_ratio(summaries: GeneSummaries, fit: FitResult) -> LikelihoodRatio:
    """Likelihood ratio of null to non-null and the posterior t-statistic.

    With ``x = d_g - tau``, ``lam_g = s2_g / (s2_g + sigma2_g)`` where ``s2_g``
    is the effect variance (``sigma_psi2``, or ``v0 * sigma2_eps_g`` for RG)
    and ``sigma2_g`` the null variance of ``d_g``,

        T_g = (lam_g x + (1 - lam_g) psi) / sqrt(lam_g sigma2_g)

    is the posterior mean of the gene effect over its posterior standard
    deviation, and ``f0/f1 = (1 - lam_g)^(-1/2) exp(-T_g^2/2 + psi^2/(2 s2_g))``.

    When the fitted spread is 0 the non-null density is a pure mean shift,
    ``lam_g = 0`` and ``T_g`` falls back to ``x / sigma_g``. In the
    three-groups mode the non-null density is the ``p1 : p2`` mixture of both
    non-null components, and ``T_g`` uses the sign of ``psi`` from the
    component with the larger posterior probability.
    """
    if len(summaries) != fit.post1.size:
        raise ValueError("summaries and fit cover different numbers of genes")
    p = fit.params
    x = summaries.d - p.tau
    var0 = fit.null_variance
    var1 = fit.nonnull_variance
    spread_var = var1 - var0
    log_f0 = stats.norm.logpdf(x, 0.0, np.sqrt(var0))
    log_fp = stats.norm.logpdf(x, p.psi, np.sqrt(var1))
    if fit.components == 3 and p.p2 > 0:
        log_fm = stats.norm.logpdf(x, -p.psi, np.sqrt(var1))
        share = p.p1 / (p.p1 + p.p2)
        # weighted logsumexp tolerates a component whose weight is exactly 0
        log_f1 = special.logsumexp([log_fp, log_fm], axis=0,
                                   b=np.array([share, 1 - share])[:, None])
        psi_eff = np.where(fit.post1 >= fit.post2, p.psi, -p.psi)
    else:
        log_f1 = log_fp
        psi_eff = np.full(x.size, p.psi)
    log_lr = log_f0 - log_f1
    if p.spread > 0:
        lam = spread_var / var1
        t_post = (lam * x + (1 - lam) * psi_eff) / np.sqrt(lam * var0)
    else:
        lam = np.zeros(x.size)
        t_post = x / np.sqrt(var0)
    with np.errstate(over="ignore"):
        lr = np.exp(log_lr)
    return LikelihoodRatio(lr=lr, log_lr=log_lr, t_post=t_post, lam=np.clip(lam, 0.0, 1.0))


def lr_posterior_form(summaries: GeneSummaries, fit: FitResult) -> np.ndarray:
    """Two-groups ``f0/f1`` in the ``T_g`` form, for checking :func:`likelihood_ratio`.

    Requires a positive spread.
    """
    p = fit.params
    if p.spread <= 0:
        raise ValueError("the T_g form needs a positive spread")
    var0 = fit.null_variance
    s2 = fit.nonnull_variance - var0
    lam = s2 / (s2 + var0)
    x = summaries.d - p.tau
    t = (lam * x + (1 - lam) * p.psi) / np.sqrt(lam * var0)
    return (1 - lam) ** -0.5 * np.exp(-0.5 * t * t + p.psi**2 / (2 * s2))


def fixed_effect_statistic(summaries: GeneSummaries, prior: VariancePrior | None,
                           kind: ModelKind | str, tau: float | None = None) -> np.ndarray:
    """``(d_g - tau) / sigma_g`` for the fixed-mean kinds FR, FF and FH.

    This is the limit of ``T_g`` as ``lam_g -> 1``. FR uses the posterior
    mode of the error variance (a moderated t), FF the gene's own ``m_g``
    (an ordinary t) and FH the pooled variance. ``tau`` defaults to the
    median of ``d``.
    """
    kind = ModelKind.parse(kind)
    if kind.random_mean:
        raise ValueError(f"{kind.value} is a random-mean model; use likelihood_ratio")
    tau = float(np.median(summaries.d)) if tau is None else float(tau)
    err = error_variances(summaries, prior, kind)
    return (summaries.d - tau) / np.sqrt(err * summaries.scale)


def classify_local_fdr(fit: FitResult, config: DecisionConfig | None = None) -> np.ndarray:
    """Call genes whose posterior null probability is below the threshold."""
    config = config or DecisionConfig()
    return fit.local_fdr < config.local_fdr_threshold


def null_t_scale(summaries: GeneSummaries, fit: FitResult) -> tuple[np.ndarray, np.ndarray]:
    """Per-gene ``(variance, df)`` of the null predictive t law of ``d_g`` given ``m_g``.

    Under the null, ``(d_g - tau) / sqrt(variance)`` has a Student t law on
    ``df`` degrees of freedom once the error variance is integrated out:
    ``variance = c_g (m_g f_g/2 + 1/beta) / (f_g/2 + alpha)`` on
    ``f_g + 2 alpha`` df for the random-variance kinds, ``c_g m_g`` on ``f_g``
    df for RF and ``c_g`` times the pooled variance on ``sum f_g`` df for RH,
    where ``c_g`` is the variance multiplier of ``d_g``.
    """
    law = fit.model.variance_law
    c = summaries.scale
    if law == "random":
        h = summaries.f / 2
        prior = fit.prior
        var = c * (summaries.m * h + 1 / prior.beta) / (h + prior.alpha)
        df = summaries.f + 2 * prior.alpha
    elif law == "fixed":
        var = c * summaries.m
        df = summaries.f.copy()
    else:
        var = c * float(np.sum(summaries.m * summaries.f) / np.sum(summaries.f))
        df = np.full(len(summaries), float(np.sum(summaries.f)))
    return var, df


def theoretical_null_pvalues(summaries: GeneSummaries, fit: FitResult,
                             null: str = "normal") -> np.ndarray:
    """Two-sided p-values of ``d_g`` under its null distribution.

    ``null="normal"`` uses ``N(tau, sigma2_g)`` with the plug-in variance of
    the fit. That reference ignores the uncertainty in the plug-in, so with
    few residual degrees of freedom its tails are too light and the p-values
    are anticonservative. ``null="t"`` integrates the error variance out and
    uses the exact t law of :func:`null_t_scale`.
    """
    x = np.abs(summaries.d - fit.params.tau)
    if null == "normal":
        return np.minimum(2 * stats.norm.sf(x / _null_sd(fit)), 1.0)
    if null == "t":
        var, df = null_t_scale(summaries, fit)
        return np.minimum(2 * stats.t.sf(x / np.sqrt(var), df), 1.0)
    raise ValueError(f"null must be one of {NULL_DISTRIBUTIONS}")


def bh_procedure(p_values, q_star: float):
    """Benjamini-Hochberg step-up rule.

    Returns ``(calls, adjusted)``: genes up to the largest sorted index ``k``
    with ``p_(k) <= q* k / G`` are called, and ``adjusted`` are the usual
    monotone BH-adjusted p-values. Ties at the cutoff are all called.
    """
    p = np.asarray(p_values, dtype=float)
    if p.ndim != 1:
        raise ValueError("p_values must be one-dimensional")
    if np.any(~((p >= 0) & (p <= 1))):
        raise ValueError("p-values must lie in [0, 1]")
    if not 0 <= q_star <= 1:
        raise ValueError("q_star must lie in [0, 1]")
    G = p.size
    if G == 0:
        return np.zeros(0, dtype=bool), np.zeros(0)
    order = np.argsort(p, kind="stable")
    ranked = p[order]
    ranks = np.arange(1, G + 1)
    ok = np.flatnonzero(ranked <= q_star * ranks / G)
    calls = np.zeros(G, dtype=bool)
    if ok.size:
        cutoff = ranked[ok[-1]]
        calls = p <= cutoff
    adj_sorted = np.minimum.accumulate((ranked * G / ranks)[::-1])[::-1]
    adjusted = np.empty(G)
    adjusted[order] = np.minimum(adj_sorted, 1.0)
    return calls, adjusted


def decide(summaries: GeneSummaries, fit: FitResult,
           config: DecisionConfig | None = None) -> GeneInference:
    """Assemble likelihood ratios, p-values and both decision rules."""
    config = config or DecisionConfig()
    lr = likelihood_ratio(summaries, fit)
    pvals = theoretical_null_pvalues(summaries, fit, config.null_distribution)
    bh_calls, adjusted = bh_procedure(pvals, config.fdr_level)
    big = np.abs(summaries.d - fit.params.tau) >= config.min_abs_effect
    return GeneInference(
        gene_ids=summaries.gene_ids,
        lr=lr.lr,
        t_post=lr.t_post,
        lam=lr.lam,
        local_fdr=fit.local_fdr,
        p_value=pvals,
        bh_adjusted=adjusted,
        call_local=classify_local_fdr(fit, config) & big,
        call_fdr=bh_calls & big,
    )
