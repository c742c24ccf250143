"""Laplace-approximated EM for the two- and three-groups mixed-effects model.

After the Laplace step the error variance of every gene is replaced by a
plug-in value (posterior mode, raw ``m_g`` or a pooled estimate, depending on
the model kind), and ``d_g`` follows a normal mixture

    null:        N(tau,        var0_g)
    non-null 1:  N(tau + psi,  var1_g)
    non-null 2:  N(tau - psi,  var1_g)     (three-groups mode only)

with ``var0_g = sigma2_g * c_g`` and ``var1_g = sigma_psi2 + var0_g`` (random
mean families) or ``(v0 + c_g) * sigma2_g`` (RG). ``c_g`` is ``1/n1 + 1/n2``,
or ``1/n`` for paired data.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import special

from . import kernels
from .core import GeneSummaries, ModelKind, normal_logpdf
from .prior import (VariancePrior, pooled_variance, posterior_mean_variance,
                    posterior_mode_variance)

log = logging.getLogger(__name__)

ROOT_XTOL = 1e-14
ROOT_RTOL = 4 * np.finfo(float).eps
ROOT_MAXITER = 200
PLUGINS = ("mode", "mean")


class NonIdentifiableError(ValueError):
    """The requested model cannot be fitted as a mixture."""


@dataclass(frozen=True)
class MixtureParams:
    """Mixture parameters: ``p1`` (and ``p2``), ``tau``, ``psi`` and one spread.

    ``sigma_psi2`` is the non-null effect variance of the RR/RF/RH kinds;
    ``v0`` is the RG scale factor. Exactly one of them is set.
    """

    p1: float
    tau: float
    psi: float
    sigma_psi2: float | None = None
    v0: float | None = None
    p2: float = 0.0

    def __post_init__(self):
        if (self.sigma_psi2 is None) == (self.v0 is None):
            raise ValueError("exactly one of sigma_psi2 and v0 must be given")
        if not (0 <= self.p1 <= 1 and 0 <= self.p2 <= 1 and self.p1 + self.p2 <= 1 + 1e-12):
            raise ValueError(f"invalid mixture probabilities p1={self.p1}, p2={self.p2}")
        if self.spread < 0:
            raise ValueError("the non-null spread must be nonnegative")
        for name in ("p1", "p2", "tau", "psi"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    @property
    def p0(self) -> float:
        return max(0.0, 1.0 - self.p1 - self.p2)

    @property
    def spread(self) -> float:
        return self.sigma_psi2 if self.v0 is None else self.v0

    def with_spread(self, value: float) -> "MixtureParams":
        if self.v0 is None:
            return replace(self, sigma_psi2=value)
        return replace(self, v0=value)

    def as_dict(self) -> dict:
        out = {"p1": self.p1, "p2": self.p2, "tau": self.tau, "psi": self.psi}
        if self.v0 is None:
            out["sigma_psi2"] = self.sigma_psi2
        else:
            out["v0"] = self.v0
        return out


@dataclass(frozen=True)
class EmConfig:
    max_iters: int = 2000
    tol: float = 1e-8
    post_tol: float = 1e-6
    init: MixtureParams | str = "auto"
    component_count: int = 2
    variance_plugin: str = "mode"

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if not self.tol >= 0 or not self.post_tol >= 0:
            raise ValueError("tolerances must be nonnegative")
        if self.component_count not in (2, 3):
            raise ValueError("component_count must be 2 or 3")
        if isinstance(self.init, str) and self.init != "auto":
            raise ValueError("init must be 'auto' or a MixtureParams")
        if self.variance_plugin not in PLUGINS:
            raise ValueError(f"variance_plugin must be one of {PLUGINS}")


@dataclass
class EmTrace:
    """Per-iteration parameters, approximate log-likelihood and posterior change."""

    params: list = field(default_factory=list)
    loglik: list = field(default_factory=list)
    max_change: list = field(default_factory=list)

    def record(self, params, loglik, change):
        self.params.append(params)
        self.loglik.append(loglik)
        self.max_change.append(change)

    def __len__(self):
        return len(self.loglik)

    def p1_path(self) -> np.ndarray:
        return np.array([p.p1 for p in self.params])


@dataclass(frozen=True)
class FitResult:
    params: MixtureParams
    prior: VariancePrior | None
    post1: np.ndarray
    post2: np.ndarray
    trace: EmTrace
    model: ModelKind
    components: int
    converged: bool
    error_variance: np.ndarray
    scale: np.ndarray

    @property
    def posterior_nonnull(self) -> np.ndarray:
        return self.post1 + self.post2

    @property
    def local_fdr(self) -> np.ndarray:
        return np.clip(1.0 - self.post1 - self.post2, 0.0, 1.0)

    @property
    def null_variance(self) -> np.ndarray:
        """Plug-in variance of ``d_g`` under the null."""
        return self.error_variance * self.scale

    @property
    def nonnull_variance(self) -> np.ndarray:
        return _nonnull_variance(self.model, self.params.spread, self.error_variance, self.scale)

    @property
    def n_iter(self) -> int:
        return len(self.trace) - 1

    @property
    def loglik(self) -> float:
        return self.trace.loglik[-1]


def error_variances(summaries: GeneSummaries, prior: VariancePrior | None,
                    kind: ModelKind | str, plugin: str = "mode") -> np.ndarray:
    """Per-gene plug-in error variance for the model kind.

    Random-variance kinds use the posterior mode of ``sigma^2`` given ``m_g``
    (``plugin="mode"``, the Laplace expansion point) or, optionally, the
    posterior mean (``plugin="mean"``), which is less biased downward when
    ``f_g`` is small.
    """
    kind = ModelKind.parse(kind)
    law = kind.variance_law
    if law == "random":
        if prior is None:
            raise ValueError(f"{kind.value} needs a fitted variance prior")
        if plugin == "mean":
            return posterior_mean_variance(summaries.m, summaries.f, prior)
        if plugin != "mode":
            raise ValueError(f"variance plugin must be one of {PLUGINS}")
        return posterior_mode_variance(summaries.m, summaries.f, prior)
    if law == "fixed":
        zero = np.flatnonzero(summaries.m <= 0)
        if zero.size:
            ids = ", ".join(summaries.gene_ids[i] for i in zero[:10])
            raise ValueError(f"{kind.value} needs m_g > 0; zero for {ids}")
        return summaries.m.copy()
    return np.full(len(summaries), pooled_variance(summaries))


def _nonnull_variance(kind, spread, err_var, scale):
    if kind is ModelKind.RG:
        return (spread + scale) * err_var
    return spread + err_var * scale


def _spread_coefficients(kind, err_var, scale):
    """``(a, b)`` with non-null variance ``a * spread + b``."""
    if kind is ModelKind.RG:
        return np.ascontiguousarray(err_var), np.ascontiguousarray(scale * err_var)
    return np.ones_like(err_var), np.ascontiguousarray(err_var * scale)


def _check_kind(kind: ModelKind, components: int) -> None:
    if not kind.random_mean:
        raise NonIdentifiableError(
            f"{kind.value} has fixed gene effects: the mixture probability is not "
            "identifiable (EM drives p1 to 1). Use fixed_effect_divergence() to "
            "inspect this, or the fixed-effect statistics in ebmix.inference.")
    if components == 3 and kind not in (ModelKind.RR, ModelKind.RG):
        raise ValueError("the three-groups mixture is only available for RR and RG")


class _Problem:
    """Arrays shared by every iteration, in canonical gene order."""

    def __init__(self, summaries, prior, kind, components, kern, canonical=True,
                 plugin="mode"):
        self.kind = kind
        self.components = components
        self.kern = kern
        err_var = error_variances(summaries, prior, kind, plugin)
        keys = (summaries.scale, err_var, summaries.d)
        self.order = np.lexsort(keys) if canonical else np.arange(len(summaries))
        o = self.order
        self.d = np.ascontiguousarray(summaries.d[o])
        self.err_var = np.ascontiguousarray(err_var[o])
        self.scale = np.ascontiguousarray(summaries.scale[o])
        self.var0 = np.ascontiguousarray(self.err_var * self.scale)
        self.a, self.b = _spread_coefficients(kind, self.err_var, self.scale)
        self.G = self.d.size
        self.post1 = np.empty(self.G)
        self.post2 = np.empty(self.G)
        var_d = float(np.var(self.d))
        self.spread_hi = 10 * max(var_d, float(np.mean(self.var0))) / float(np.median(self.a))

    def var1(self, spread):
        return np.ascontiguousarray(self.a * spread + self.b)

    def e_step(self, params, post1=None, post2=None):
        post1 = self.post1 if post1 is None else post1
        post2 = self.post2 if post2 is None else post2
        ll = self.kern.mixture_posteriors(self.d, self.var0, self.var1(params.spread),
                                          params.tau, params.psi, params.p0, params.p1,
                                          params.p2, post1, post2)
        return ll

    def unorder(self, arr):
        out = np.empty_like(arr)
        out[self.order] = arr
        return out


def _solve_spread(prob: _Problem, w, wr2, previous):
    """Maximize the weighted normal likelihood over the non-null spread."""
    kern = prob.kern
    a, b = prob.a, prob.b
    if kern.variance_score(0.0, w, wr2, a, b) <= 0:
        candidate = 0.0
    else:
        hi = prob.spread_hi
        for _ in range(60):
            if kern.variance_score(hi, w, wr2, a, b) < 0:
                break
            hi *= 4
        else:
            warnings.warn("no sign change for the spread equation; spread set to 0",
                          RuntimeWarning, stacklevel=3)
            return 0.0
        candidate, _, ok = kern.solve_variance_root(w, wr2, a, b, 0.0, hi, ROOT_XTOL,
                                                    ROOT_RTOL, ROOT_MAXITER)
        if not ok:
            log.debug("spread root solve hit the iteration limit at %g", candidate)
    if previous is not None and candidate != previous:
        if (kern.variance_objective(candidate, w, wr2, a, b)
                < kern.variance_objective(previous, w, wr2, a, b)):
            return previous
    return candidate


def _m_step(prob: _Problem, post1, post2, prev: MixtureParams) -> MixtureParams:
    G = prob.G
    d, var0 = prob.d, prob.var0
    p1 = float(np.sum(post1)) / G
    three = prob.components == 3
    p2 = float(np.sum(post2)) / G if three else 0.0
    post0 = np.clip(1.0 - post1 - post2, 0.0, 1.0)
    w0 = post0 / var0
    var1 = prob.var1(prev.spread)
    w1 = post1 / var1
    w2 = post2 / var1
    s1 = float(np.sum(post1))
    s2 = float(np.sum(post2)) if three else 0.0
    if s1 + s2 == 0.0:
        tau = float(np.sum(w0 * d) / np.sum(w0))
        return replace(prev, p1=0.0, p2=0.0, tau=tau).with_spread(0.0)
    if not three:
        sw0 = float(np.sum(w0))
        tau = float(np.sum(w0 * d)) / sw0 if sw0 > 0 else prev.tau
        psi = float(np.sum(w1 * (d - tau)) / np.sum(w1))
        resid = d - tau - psi
        w = np.ascontiguousarray(post1)
        wr2 = np.ascontiguousarray(post1 * resid * resid)
    else:
        # weighted least squares for (tau, psi) at the current spread
        wn = w1 + w2
        wdiff = w1 - w2
        A = np.array([[np.sum(w0) + np.sum(wn), np.sum(wdiff)],
                      [np.sum(wdiff), np.sum(wn)]])
        rhs = np.array([np.sum(w0 * d) + np.sum(wn * d), np.sum(wdiff * d)])
        tau, psi = (float(v) for v in np.linalg.solve(A, rhs))
        r1 = d - tau - psi
        r2 = d - tau + psi
        w = np.ascontiguousarray(post1 + post2)
        wr2 = np.ascontiguousarray(post1 * r1 * r1 + post2 * r2 * r2)
    partial = replace(prev, p1=p1, p2=p2, tau=tau, psi=psi)
    spread = _solve_spread(prob, w, wr2, prev.spread)
    return partial.with_spread(spread)


def _auto_init(prob: _Problem) -> MixtureParams:
    d = prob.d
    tau = float(np.median(d))
    k = max(2, int(math.ceil(0.05 * prob.G)))
    dev = d - tau
    top = np.argsort(-np.abs(dev), kind="stable")[:k]
    three = prob.components == 3
    if three:
        sel = np.abs(dev[top])
        psi = float(np.mean(sel))
    else:
        sel = d[top]
        psi = float(np.mean(sel)) - tau
    if prob.kind is ModelKind.RG:
        v0 = float(np.var(sel)) / float(np.mean(prob.err_var[top])) - float(np.mean(prob.scale[top]))
        spread = {"v0": max(v0, 0.01)}
    else:
        spread = {"sigma_psi2": max(float(np.var(sel)) - float(np.mean(prob.var0[top])), 0.01)}
    p1, p2 = (0.05, 0.05) if three else (0.05, 0.0)
    return MixtureParams(p1=p1, p2=p2, tau=tau, psi=psi, **spread)


def _coerce_init(init: MixtureParams, kind: ModelKind, components: int) -> MixtureParams:
    if kind is ModelKind.RG and init.v0 is None:
        raise ValueError("RG initial values need v0")
    if kind is not ModelKind.RG and init.sigma_psi2 is None:
        raise ValueError(f"{kind.value} initial values need sigma_psi2")
    if components == 2 and init.p2 != 0:
        raise ValueError("two-groups initial values must have p2 = 0")
    if components == 3 and init.p2 == 0:
        raise ValueError("three-groups initial values need p2 > 0")
    return init


def fit(summaries: GeneSummaries, prior: VariancePrior | None,
        kind: ModelKind | str = ModelKind.RR, config: EmConfig | None = None,
        *, backend: str | None = None) -> FitResult:
    """Fit the mixture parameters by Laplace-approximated EM.

    ``prior`` is required for the RR and RG kinds and ignored by RF and RH.
    Fixed-mean kinds (FR, FF, FH) raise :class:`NonIdentifiableError`.
    Non-convergence is reported through ``FitResult.converged``.
    """
    kind = ModelKind.parse(kind)
    config = config or EmConfig()
    components = config.component_count
    _check_kind(kind, components)
    if kind.variance_law != "random":
        prior = None
    prob = _Problem(summaries, prior, kind, components, kernels.get(backend),
                    plugin=config.variance_plugin)
    if isinstance(config.init, MixtureParams):
        params = _coerce_init(config.init, kind, components)
    else:
        params = _auto_init(prob)

    trace = EmTrace()
    ll = prob.e_step(params)
    post1, post2 = prob.post1.copy(), prob.post2.copy()
    trace.record(params, ll, float("nan"))
    converged = False
    new1 = np.empty(prob.G)
    new2 = np.empty(prob.G)
    for _ in range(config.max_iters):
        params = _m_step(prob, post1, post2, params)
        new_ll = prob.e_step(params, new1, new2)
        change = float(max(np.max(np.abs(new1 - post1)), np.max(np.abs(new2 - post2))))
        trace.record(params, new_ll, change)
        rel = abs(new_ll - ll) / max(abs(ll), 1.0)
        post1, new1 = new1, post1
        post2, new2 = new2, post2
        ll = new_ll
        if rel < config.tol and change < config.post_tol:
            converged = True
            break
    if not converged:
        log.warning("EM stopped after %d iterations without converging", config.max_iters)
    err_var = prob.unorder(prob.err_var)
    return FitResult(params=params, prior=prior, post1=prob.unorder(post1),
                     post2=prob.unorder(post2), trace=trace, model=kind,
                     components=components, converged=converged,
                     error_variance=err_var, scale=summaries.scale.copy())


def fit_at(summaries: GeneSummaries, prior: VariancePrior | None, params: MixtureParams,
           kind: ModelKind | str = ModelKind.RR, *, plugin: str = "mode") -> FitResult:
    """A :class:`FitResult` holding ``params`` as given, with their posteriors.

    Useful for evaluating known or externally estimated parameters with the
    inference tools.
    """
    kind = ModelKind.parse(kind)
    components = 3 if params.p2 > 0 else 2
    _check_kind(kind, components)
    if kind.variance_law != "random":
        prior = None
    prob = _Problem(summaries, prior, kind, components, kernels.get(None), canonical=False,
                    plugin=plugin)
    ll = prob.e_step(params)
    trace = EmTrace()
    trace.record(params, ll, float("nan"))
    return FitResult(params=params, prior=prior, post1=prob.post1.copy(),
                     post2=prob.post2.copy(), trace=trace, model=kind, components=components,
                     converged=True, error_variance=prob.err_var.copy(),
                     scale=summaries.scale.copy())


def laplace_complete_loglik(summaries: GeneSummaries, prior: VariancePrior | None,
                            params: MixtureParams, kind: ModelKind | str = ModelKind.RR,
                            *, plugin: str = "mode", backend: str | None = None) -> float:
    """Approximate marginal log-likelihood of ``{d_g}`` at ``params``.

    Factors of the Laplace approximation that do not depend on the mixture
    parameters (the plug-in density of ``m_g``, the prior ordinate and the
    curvature term) are left out.
    """
    kind = ModelKind.parse(kind)
    components = 3 if params.p2 > 0 else 2
    prob = _Problem(summaries, prior, kind, components, kernels.get(backend), canonical=False,
                    plugin=plugin)
    return prob.e_step(params)


def laplace_gene_loglik(d, m, f, scale, prior: VariancePrior, params: MixtureParams,
                        component: int = 0, kind: ModelKind | str = ModelKind.RR):
    """Log of one gene's complete-data likelihood with the error variance integrated out.

    The integrand over ``v = sigma^2`` is the density of ``d`` given the
    component, times the scaled chi-square density of ``m`` and the
    inverse-gamma prior density of ``v``. The last two factors are expanded
    to second order in ``v`` around their joint maximizer, which is the
    posterior mode ``(m f/2 + 1/beta) / (f/2 + alpha + 1)``; the density of
    ``d`` is evaluated at that mode.

    ``component`` is 0 (null), 1 (mean ``tau + psi``) or 2 (``tau - psi``).
    """
    kind = ModelKind.parse(kind)
    if kind not in (ModelKind.RR, ModelKind.RG):
        raise ValueError("the Laplace step applies to the random-variance kinds RR and RG")
    if component not in (0, 1, 2):
        raise ValueError("component must be 0, 1 or 2")
    d, m, f, scale = np.broadcast_arrays(*(np.asarray(x, dtype=float) for x in (d, m, f, scale)))
    h = f / 2
    alpha, beta = prior.alpha, prior.beta
    k1 = h + alpha + 1
    c = m * h + 1 / beta
    v = c / k1
    log_m = (special.xlogy(h - 1, m) + h * np.log(h) - special.gammaln(h)
             - h * np.log(v) - m * h / v)
    log_prior = -(alpha + 1) * np.log(v) - 1 / (beta * v) - special.gammaln(alpha) - alpha * np.log(beta)
    log_width = 0.5 * (np.log(2 * np.pi) + 2 * np.log(c) - 3 * np.log(k1))
    if component == 0:
        mean, var = params.tau, v * scale
    else:
        sign = 1.0 if component == 1 else -1.0
        mean = params.tau + sign * params.psi
        var = _nonnull_variance(kind, params.spread, v, scale)
    return normal_logpdf(d, mean, var) + log_m + log_prior + log_width


def e_step(summaries: GeneSummaries, prior: VariancePrior | None, params: MixtureParams,
           kind: ModelKind | str = ModelKind.RR, *, plugin: str = "mode",
           backend: str | None = None):
    """Posterior probabilities ``(p_1g, p_2g)`` of the non-null components."""
    kind = ModelKind.parse(kind)
    components = 3 if params.p2 > 0 else 2
    prob = _Problem(summaries, prior, kind, components, kernels.get(backend), canonical=False,
                    plugin=plugin)
    prob.e_step(params)
    return prob.post1.copy(), prob.post2.copy()


def m_step(summaries: GeneSummaries, prior: VariancePrior | None, posteriors,
           params_prev: MixtureParams, kind: ModelKind | str = ModelKind.RR,
           *, components: int | None = None, plugin: str = "mode",
           backend: str | None = None) -> MixtureParams:
    """One conditional-maximization update of the mixture parameters.

    ``posteriors`` is ``p_1g`` or a pair ``(p_1g, p_2g)``.
    """
    kind = ModelKind.parse(kind)
    if isinstance(posteriors, tuple):
        post1, post2 = (np.asarray(p, dtype=float) for p in posteriors)
    else:
        post1 = np.asarray(posteriors, dtype=float)
        post2 = np.zeros_like(post1)
    if components is None:
        components = 3 if (params_prev.p2 > 0 or np.any(post2 > 0)) else 2
    prob = _Problem(summaries, prior, kind, components, kernels.get(backend), canonical=False,
                    plugin=plugin)
    return _m_step(prob, np.ascontiguousarray(post1), np.ascontiguousarray(post2), params_prev)


def spread_equation_residual(summaries: GeneSummaries, prior: VariancePrior | None,
                             posteriors, params: MixtureParams,
                             kind: ModelKind | str = ModelKind.RR, *,
                             plugin: str = "mode") -> float:
    """Residual of the stationarity equation for ``sigma_psi2`` (or ``v0``).

    Left side minus right side of the spread update equation, evaluated at
    the tau, psi and spread in ``params``.
    """
    kind = ModelKind.parse(kind)
    if isinstance(posteriors, tuple):
        post1, post2 = (np.asarray(p, dtype=float) for p in posteriors)
    else:
        post1 = np.asarray(posteriors, dtype=float)
        post2 = np.zeros_like(post1)
    err_var = error_variances(summaries, prior, kind, plugin)
    a, b = _spread_coefficients(kind, err_var, summaries.scale)
    v = a * params.spread + b
    r1 = summaries.d - params.tau - params.psi
    r2 = summaries.d - params.tau + params.psi
    lhs = np.sum((post1 + post2) * a / v)
    rhs = np.sum(a * (post1 * r1 * r1 + post2 * r2 * r2) / (v * v))
    return float(lhs - rhs)


def fixed_effect_divergence(summaries: GeneSummaries, prior: VariancePrior | None,
                            kind: ModelKind | str = ModelKind.FF, *, p1_init: float = 0.05,
                            max_iters: int = 500) -> np.ndarray:
    """EM sequence of ``p1`` for a fixed-mean model.

    With gene effects treated as fixed, each non-null density is evaluated at
    its own maximum, so every update raises ``p1``. The returned path stops
    once ``p1`` reaches 1 to within 1e-12.
    """
    kind = ModelKind.parse(kind)
    if kind.random_mean:
        raise ValueError(f"{kind.value} is a random-mean model")
    var0 = error_variances(summaries, prior if kind.variance_law == "random" else None,
                           kind) * summaries.scale
    d = summaries.d
    p1 = float(p1_init)
    tau = float(np.median(d))
    path = [p1]
    for _ in range(max_iters):
        ratio = np.exp(-(d - tau) ** 2 / (2 * var0))
        post1 = p1 / ((1 - p1) * ratio + p1)
        w0 = (1 - post1) / var0
        p1 = float(np.mean(post1))
        if np.sum(w0) > 0:
            tau = float(np.sum(w0 * d) / np.sum(w0))
        path.append(p1)
        if p1 >= 1 - 1e-12:
            break
    return np.array(path)
