"""Inverse-gamma prior on gene-specific error variances.

The prior puts ``1/sigma^2 ~ Gamma(alpha, scale=beta)``, so the mean squared
errors ``m_g`` follow a scaled-F marginal whose density is available in closed
form. Hyperparameters are estimated by maximum likelihood on that marginal or
by matching its first two moments.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import optimize, special

from .core import GeneSummaries

MIN_GENES = 10


class PriorFitError(RuntimeError):
    """Hyperparameter estimation failed.

    ``point`` holds the best ``(alpha, beta)`` found and ``grad_norm`` the
    gradient norm of the negative log-likelihood (in log-parameters) there.
    """

    def __init__(self, message, point=None, grad_norm=None):
        super().__init__(message)
        self.point = point
        self.grad_norm = grad_norm


@dataclass(frozen=True)
class VariancePrior:
    alpha: float
    beta: float
    method: str = "max-likelihood"

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError(f"alpha and beta must be positive, got {self.alpha}, {self.beta}")
        if self.method not in ("max-likelihood", "moments", "fixed"):
            raise ValueError(f"unknown estimation method {self.method!r}")
        if self.method == "moments" and self.alpha <= 2:
            raise ValueError("moment estimates require alpha > 2")

    @property
    def mode(self) -> float:
        """Mode of the prior on sigma^2, ``1/((alpha+1) beta)``."""
        return 1.0 / ((self.alpha + 1) * self.beta)

    @property
    def mean(self) -> float:
        return 1.0 / ((self.alpha - 1) * self.beta) if self.alpha > 1 else np.inf


def _check_prior_args(alpha, beta):
    if not (np.all(np.asarray(alpha) > 0) and np.all(np.asarray(beta) > 0)):
        raise ValueError("alpha and beta must be positive")


def marginal_log_density_m(m, f, prior: VariancePrior | None = None, *, alpha=None, beta=None):
    """Log of the closed-form marginal density of the mean squared error.

    Returns ``-inf`` where ``m == 0`` and ``f >= 3`` (and ``+inf`` for
    ``f == 1``, where the density has an integrable pole at zero).
    """
    if prior is not None:
        alpha, beta = prior.alpha, prior.beta
    _check_prior_args(alpha, beta)
    m = np.asarray(m, dtype=float)
    f = np.asarray(f, dtype=float)
    if np.any(m < 0) or np.any(f < 1):
        raise ValueError("need m >= 0 and f >= 1")
    h = f / 2
    return (special.xlogy(h - 1, m) + h * np.log(h) - special.gammaln(h)
            - special.gammaln(alpha) - alpha * np.log(beta)
            + special.gammaln(h + alpha) - (h + alpha) * np.log(m * h + 1 / beta))


def _negloglik(theta, m, h, const):
    """Negative marginal log-likelihood and its gradient in (log alpha, log beta)."""
    alpha, beta = np.exp(theta)
    q = m * h + 1 / beta
    ll = (const - m.size * (special.gammaln(alpha) + alpha * np.log(beta))
          + np.sum(special.gammaln(h + alpha) - (h + alpha) * np.log(q)))
    d_alpha = (-m.size * (special.digamma(alpha) + np.log(beta))
               + np.sum(special.digamma(h + alpha) - np.log(q)))
    d_beta = -m.size * alpha / beta + np.sum((h + alpha) / (beta * beta * q))
    return -ll, -np.array([alpha * d_alpha, beta * d_beta])


def _usable_m(summaries: GeneSummaries):
    m, f = summaries.m, summaries.f
    keep = m > 0
    if not keep.all():
        warnings.warn(f"{int((~keep).sum())} gene(s) with m = 0 excluded from the prior fit",
                      stacklevel=3)
    if keep.sum() < MIN_GENES:
        raise PriorFitError(f"need at least {MIN_GENES} genes with m > 0, got {int(keep.sum())}")
    return m[keep], f[keep]


def prior_loglik(summaries: GeneSummaries, alpha: float, beta: float) -> float:
    """Marginal log-likelihood of ``{m_g}`` (genes with ``m = 0`` skipped)."""
    m, f = summaries.m, summaries.f
    keep = m > 0
    return float(np.sum(marginal_log_density_m(m[keep], f[keep], alpha=alpha, beta=beta)))


def fit_variance_prior(summaries: GeneSummaries, *, tol: float = 1e-13,
                       max_iter: int = 500) -> VariancePrior:
    """Maximum-likelihood ``(alpha, beta)`` from the marginal of ``{m_g}``.

    Quasi-Newton search (L-BFGS-B) over ``(log alpha, log beta)``, started at
    the moment estimates when they exist.
    """
    m, f = _usable_m(summaries)
    h = f / 2
    const = float(np.sum((h - 1) * np.log(m) + h * np.log(h) - special.gammaln(h)))
    try:
        start = fit_variance_prior_moments(summaries)
        x0 = np.log([start.alpha, start.beta])
    except PriorFitError:
        x0 = np.log([2.5, 1 / (1.5 * np.mean(m))])
    bounds = [(np.log(1e-4), np.log(1e6)), (np.log(1e-10), np.log(1e10))]
    res = optimize.minimize(_negloglik, x0, args=(m, h, const), jac=True, method="L-BFGS-B",
                            bounds=bounds,
                            options={"maxiter": max_iter, "ftol": tol, "gtol": 1e-10})
    grad_norm = float(np.linalg.norm(res.jac))
    alpha, beta = np.exp(res.x)
    if not res.success:
        # L-BFGS-B reports precision loss at an optimum as a failure; accept
        # only when the gradient is small relative to the sample size.
        if grad_norm > 1e-5 * m.size:
            raise PriorFitError(f"prior fit did not converge: {res.message}",
                                point=(float(alpha), float(beta)), grad_norm=grad_norm)
    return VariancePrior(float(alpha), float(beta), "max-likelihood")


def fit_variance_prior_moments(summaries: GeneSummaries) -> VariancePrior:
    """Method-of-moments ``(alpha, beta)``.

    Uses ``E[m] = E[sigma^2]`` and ``E[m^2] = E[sigma^4] (1 + 2/f)``, with
    ``E[sigma^4] / E[sigma^2]^2 = (alpha - 1)/(alpha - 2)`` under the prior.
    """
    m, f = summaries.m, summaries.f
    if m.size < MIN_GENES:
        raise PriorFitError(f"need at least {MIN_GENES} genes, got {m.size}")
    first = np.mean(m)
    second = np.mean(m * m / (1 + 2 / f))
    if first <= 0:
        raise PriorFitError("all mean squared errors are zero")
    ratio = second / first**2
    if ratio <= 1:
        raise PriorFitError(
            "mean squared errors show no excess dispersion (implied alpha <= 2); "
            "use the maximum-likelihood method")
    alpha = (2 * ratio - 1) / (ratio - 1)
    beta = 1 / ((alpha - 1) * first)
    return VariancePrior(float(alpha), float(beta), "moments")


def posterior_mode_variance(m, f, prior: VariancePrior):
    """Mode of sigma^2 given m: a convex blend of ``m`` and the prior mode."""
    m = np.asarray(m, dtype=float)
    h = np.asarray(f, dtype=float) / 2
    a = prior.alpha
    return h / (h + a + 1) * m + (a + 1) / (h + a + 1) * prior.mode


def posterior_mean_variance(m, f, prior: VariancePrior):
    """Posterior mean of sigma^2 given m (diagnostics only)."""
    m = np.asarray(m, dtype=float)
    h = np.asarray(f, dtype=float) / 2
    a = prior.alpha
    if np.any(h + a <= 1):
        raise ValueError("posterior mean requires f/2 + alpha > 1")
    return h / (h + a - 1) * m + (a + 1) / (h + a - 1) * prior.mode


def pooled_variance(summaries: GeneSummaries) -> float:
    """Homogeneous error-variance estimate, the f-weighted mean of ``m``."""
    return float(np.sum(summaries.m * summaries.f) / np.sum(summaries.f))
