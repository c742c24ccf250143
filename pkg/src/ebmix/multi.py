"""Mixture model for t >= 2 treatment groups through orthonormal contrasts.

Group means are mapped to ``t - 1`` contrasts ``d_g = H ybar_g``. Under the
null ``d_g ~ N(H tau, L0_g)`` with ``L0_g = sigma2_eps_g H diag(1/n_g) H'``;
non-null genes add ``H psi`` to the mean and ``sigma_psi2 I`` to the
covariance. For ``t = 2`` the Helmert contrast is ``(1, -1)/sqrt(2)``, so
``d``, ``tau``, ``psi`` are those of the two-group model divided by
``sqrt(2)`` and ``sigma_psi2`` is halved.

Genes sharing a sample-size pattern share the eigenvectors of
``H diag(1/n) H'``; in that basis every covariance is diagonal and the EM
updates reduce to weighted sums plus the same one-dimensional root problem
as the two-group fit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import kernels
from .core import LOG_2PI, DataValidationError, ExpressionMatrix
from .em import ROOT_MAXITER, ROOT_RTOL, ROOT_XTOL, EmConfig, EmTrace
from .prior import VariancePrior, posterior_mode_variance

ORTHO_TOL = 1e-12


@dataclass(frozen=True)
class ContrastMatrix:
    """``(t-1) x t`` matrix of orthonormal rows that each sum to zero."""

    h: np.ndarray

    def __post_init__(self):
        h = np.array(self.h, dtype=float)
        if h.ndim != 2 or h.shape[1] < 2 or h.shape[0] != h.shape[1] - 1:
            raise ValueError(f"contrast matrix must be (t-1) x t, got shape {h.shape}")
        if np.max(np.abs(h.sum(axis=1))) > ORTHO_TOL:
            raise ValueError("contrast rows must sum to zero")
        if np.max(np.abs(h @ h.T - np.eye(h.shape[0]))) > ORTHO_TOL:
            raise ValueError("contrast rows must be orthonormal")
        h.setflags(write=False)
        object.__setattr__(self, "h", h)

    @property
    def t(self) -> int:
        return self.h.shape[1]


def helmert(t: int) -> ContrastMatrix:
    """Helmert contrasts: row ``k`` is ``(1, ..., 1, -k, 0, ...) / sqrt(k(k+1))``."""
    if int(t) != t or t < 2:
        raise ValueError("need at least 2 groups")
    t = int(t)
    h = np.zeros((t - 1, t))
    for k in range(1, t):
        h[k - 1, :k] = 1.0
        h[k - 1, k] = -k
        h[k - 1] /= math.sqrt(k * (k + 1))
    return ContrastMatrix(h)


@dataclass(frozen=True)
class VectorSummaries:
    """Per-gene contrast vectors ``d`` (G x (t-1)), pooled ``m`` on ``f`` df and group sizes."""

    d: np.ndarray
    m: np.ndarray
    f: np.ndarray
    n: np.ndarray
    contrast: ContrastMatrix
    gene_ids: tuple = ()

    def __post_init__(self):
        d = np.array(self.d, dtype=float)
        if d.ndim == 1:
            d = d[:, None]
        G, k = d.shape
        if k != self.contrast.t - 1:
            raise DataValidationError(
                f"contrast vectors have {k} components, the contrast needs {self.contrast.t - 1}")
        m = np.broadcast_to(np.asarray(self.m, dtype=float), (G,)).copy()
        f = np.broadcast_to(np.asarray(self.f, dtype=float), (G,)).copy()
        n = np.broadcast_to(np.asarray(self.n, dtype=float), (G, self.contrast.t)).copy()
        if not (np.all(np.isfinite(d)) and np.all(np.isfinite(m))):
            raise DataValidationError("summaries must be finite")
        if np.any(m < 0) or np.any(f < 1) or np.any(n < 1):
            raise DataValidationError("need m >= 0, f >= 1 and every group size >= 1")
        ids = tuple(self.gene_ids) if len(self.gene_ids) else tuple(f"g{i + 1}" for i in range(G))
        if len(ids) != G:
            raise DataValidationError("inconsistent lengths across summary fields")
        for arr in (d, m, f, n):
            arr.setflags(write=False)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "f", f)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "gene_ids", ids)

    def __len__(self):
        return self.d.shape[0]

    @property
    def dim(self) -> int:
        return self.d.shape[1]

    def null_shape(self, g: int) -> np.ndarray:
        """``H diag(1/n_g) H'``, the null covariance of gene ``g`` per unit error variance."""
        h = self.contrast.h
        return (h / self.n[g]) @ h.T


def summarize_multi(data: ExpressionMatrix, contrast: ContrastMatrix | None = None) -> VectorSummaries:
    """Contrast vectors of the group means and the pooled mean squared error."""
    t = data.n_groups
    if t < 2:
        raise DataValidationError(f"need at least 2 groups, got {t}")
    contrast = contrast or helmert(t)
    if contrast.t != t:
        raise DataValidationError(f"contrast is for {contrast.t} groups, data have {t}")
    means = np.empty((data.n_genes, t))
    sse = np.zeros(data.n_genes)
    sizes = data.group_sizes()
    for i, grp in enumerate(data.groups):
        y = data.values[:, data.group_columns(grp)]
        means[:, i] = y.mean(axis=1)
        sse += ((y - means[:, i:i + 1]) ** 2).sum(axis=1)
    f = int(sizes.sum()) - t
    if f < 1:
        raise DataValidationError(
            f"no residual degrees of freedom ({int(sizes.sum())} samples in {t} groups)")
    return VectorSummaries(d=means @ contrast.h.T, m=sse / f, f=f,
                           n=np.broadcast_to(sizes, (data.n_genes, t)),
                           contrast=contrast, gene_ids=data.gene_ids)


@dataclass(frozen=True)
class VectorMixtureParams:
    """``p1``, contrast-scale means ``h_tau = H tau`` and ``h_psi = H psi``, and ``sigma_psi2``."""

    p1: float
    h_tau: np.ndarray
    h_psi: np.ndarray
    sigma_psi2: float

    def __post_init__(self):
        h_tau = np.atleast_1d(np.array(self.h_tau, dtype=float))
        h_psi = np.atleast_1d(np.array(self.h_psi, dtype=float))
        if h_tau.shape != h_psi.shape or h_tau.ndim != 1:
            raise ValueError("h_tau and h_psi must be vectors of equal length")
        if not 0 <= self.p1 <= 1:
            raise ValueError(f"invalid mixture probability p1={self.p1}")
        if not self.sigma_psi2 >= 0:
            raise ValueError("sigma_psi2 must be nonnegative")
        h_tau.setflags(write=False)
        h_psi.setflags(write=False)
        object.__setattr__(self, "h_tau", h_tau)
        object.__setattr__(self, "h_psi", h_psi)

    @property
    def p0(self) -> float:
        return 1.0 - self.p1

    def group_effects(self, contrast: ContrastMatrix) -> tuple[np.ndarray, np.ndarray]:
        """Zero-sum ``tau`` and ``psi`` vectors on the group scale."""
        return contrast.h.T @ self.h_tau, contrast.h.T @ self.h_psi


@dataclass(frozen=True)
class MultiFitResult:
    params: VectorMixtureParams
    prior: VariancePrior
    post1: np.ndarray
    trace: EmTrace
    converged: bool
    error_variance: np.ndarray
    contrast: ContrastMatrix

    @property
    def local_fdr(self) -> np.ndarray:
        return np.clip(1.0 - self.post1, 0.0, 1.0)

    @property
    def n_iter(self) -> int:
        return len(self.trace) - 1

    @property
    def loglik(self) -> float:
        return self.trace.loglik[-1]


class _Rotated:
    """Per-gene eigenbases of the null covariance, in canonical gene order."""

    def __init__(self, vs: VectorSummaries, err_var: np.ndarray, kern):
        self.kern = kern
        G, k = vs.d.shape
        patterns, inverse = np.unique(vs.n, axis=0, return_inverse=True)
        inverse = inverse.ravel()
        keys = [inverse, err_var] + [vs.d[:, j] for j in range(k - 1, -1, -1)]
        self.order = np.lexsort(keys)
        o = self.order
        self.G, self.k = G, k
        self.d = vs.d[o]
        self.err_var = err_var[o]
        pattern = inverse[o]
        h = vs.contrast.h
        basis = np.empty((len(patterns), k, k))
        eig = np.empty((len(patterns), k))
        for i, n in enumerate(patterns):
            vals, vecs = np.linalg.eigh((h / n) @ h.T)
            if vals.min() <= 0:
                raise np.linalg.LinAlgError("singular null covariance")
            eig[i], basis[i] = vals, vecs
        self.q = basis[pattern]                                # G x k x k
        self.var0 = np.ascontiguousarray(self.err_var[:, None] * eig[pattern])  # G x k
        self.flat_b = np.ascontiguousarray(self.var0.ravel())
        self.flat_a = np.ones(G * k)
        spread = float(np.mean(np.var(self.d, axis=0)))
        self.spread_hi = 10 * max(spread, float(np.mean(self.var0)))

    def rotate(self, centre):
        """Coordinates of ``d_g - centre`` in each gene's eigenbasis."""
        return np.einsum("gji,gj->gi", self.q, self.d - centre)

    def component_logs(self, params):
        z0 = self.rotate(params.h_tau)
        z1 = z0 - np.einsum("gji,j->gi", self.q, params.h_psi)
        var1 = self.var0 + params.sigma_psi2
        l0 = -0.5 * np.sum(LOG_2PI + np.log(self.var0) + z0 * z0 / self.var0, axis=1)
        l1 = -0.5 * np.sum(LOG_2PI + np.log(var1) + z1 * z1 / var1, axis=1)
        return l0, l1

    def e_step(self, params):
        l0, l1 = self.component_logs(params)
        with np.errstate(divide="ignore"):
            a0 = math.log(params.p0) + l0 if params.p0 > 0 else np.full(self.G, -np.inf)
            a1 = math.log(params.p1) + l1 if params.p1 > 0 else np.full(self.G, -np.inf)
        total = np.logaddexp(a0, a1)
        post1 = np.exp(a1 - total)
        return float(np.sum(total)), post1

    def weighted_mean(self, weights, var, centre):
        """Solve ``(sum w_g S_g^-1) x = sum w_g S_g^-1 (d_g - centre)`` with ``S_g = Q diag(var) Q'``."""
        prec = weights[:, None] / var
        mats = np.einsum("gij,gj,gkj->ik", self.q, prec, self.q)
        rhs = np.einsum("gij,gj,gkj,gk->i", self.q, prec, self.q, self.d - centre)
        return np.linalg.solve(mats, rhs)

    def unorder(self, arr):
        out = np.empty_like(arr)
        out[self.order] = arr
        return out


def _multi_spread(rot: _Rotated, post1, resid_rot, previous):
    kern = rot.kern
    w = np.ascontiguousarray(np.repeat(post1, rot.k))
    wr2 = np.ascontiguousarray((post1[:, None] * resid_rot * resid_rot).ravel())
    a, b = rot.flat_a, rot.flat_b
    if kern.variance_score(0.0, w, wr2, a, b) <= 0:
        candidate = 0.0
    else:
        hi = rot.spread_hi
        for _ in range(60):
            if kern.variance_score(hi, w, wr2, a, b) < 0:
                break
            hi *= 4
        else:
            return 0.0
        candidate, _, _ = kern.solve_variance_root(w, wr2, a, b, 0.0, hi, ROOT_XTOL,
                                                   ROOT_RTOL, ROOT_MAXITER)
    if candidate != previous and (kern.variance_objective(candidate, w, wr2, a, b)
                                  < kern.variance_objective(previous, w, wr2, a, b)):
        return previous
    return candidate


def _multi_m_step(rot: _Rotated, post1, prev: VectorMixtureParams) -> VectorMixtureParams:
    G = rot.G
    p1 = float(np.sum(post1)) / G
    post0 = np.clip(1.0 - post1, 0.0, 1.0)
    zero = np.zeros(rot.k)
    if np.sum(post1) == 0.0:
        h_tau = rot.weighted_mean(post0, rot.var0, zero)
        return VectorMixtureParams(0.0, h_tau, zero, 0.0)
    h_tau = rot.weighted_mean(post0, rot.var0, zero) if np.sum(post0) > 0 else prev.h_tau
    var1 = rot.var0 + prev.sigma_psi2
    h_psi = rot.weighted_mean(post1, var1, h_tau)
    resid = rot.rotate(h_tau + h_psi)
    spread = _multi_spread(rot, post1, resid, prev.sigma_psi2)
    return VectorMixtureParams(p1, h_tau, h_psi, spread)


def _multi_init(rot: _Rotated) -> VectorMixtureParams:
    h_tau = np.median(rot.d, axis=0)
    k = max(2, int(math.ceil(0.05 * rot.G)))
    dist = np.linalg.norm(rot.d - h_tau, axis=1)
    top = np.argsort(-dist, kind="stable")[:k]
    sel = rot.d[top]
    h_psi = sel.mean(axis=0) - h_tau
    # per-coordinate excess variance; the floor equals 0.01 on the scale of a
    # two-group difference of means
    excess = float(np.mean(np.var(sel, axis=0))) - float(np.mean(rot.var0[top]))
    return VectorMixtureParams(0.05, h_tau, h_psi, max(excess, 0.005))


def fit_multi(vs: VectorSummaries, prior: VariancePrior, config: EmConfig | None = None,
              *, backend: str | None = None) -> MultiFitResult:
    """Two-groups EM on contrast vectors with random error variances.

    ``config.init`` may be a :class:`VectorMixtureParams`; the three-groups
    mode is not available here.
    """
    config = config or EmConfig()
    if config.component_count != 2:
        raise ValueError("the multi-treatment fit supports the two-groups mixture only")
    err_var = posterior_mode_variance(vs.m, vs.f, prior)
    rot = _Rotated(vs, err_var, kernels.get(backend))
    if isinstance(config.init, VectorMixtureParams):
        params = config.init
        if params.h_tau.size != vs.dim:
            raise ValueError("initial values have the wrong dimension")
    elif config.init == "auto":
        params = _multi_init(rot)
    else:
        raise ValueError("init must be 'auto' or a VectorMixtureParams")
    trace = EmTrace()
    ll, post1 = rot.e_step(params)
    trace.record(params, ll, float("nan"))
    converged = False
    for _ in range(config.max_iters):
        params = _multi_m_step(rot, post1, params)
        new_ll, new_post = rot.e_step(params)
        change = float(np.max(np.abs(new_post - post1)))
        trace.record(params, new_ll, change)
        rel = abs(new_ll - ll) / max(abs(ll), 1.0)
        ll, post1 = new_ll, new_post
        if rel < config.tol and change < config.post_tol:
            converged = True
            break
    return MultiFitResult(params=params, prior=prior, post1=rot.unorder(post1), trace=trace,
                          converged=converged, error_variance=err_var.copy(),
                          contrast=vs.contrast)


@dataclass(frozen=True)
class MultiLR:
    """Per-gene ratios, posteriors, local-f.d.r. calls and chi-square null p-values."""

    lr: np.ndarray
    log_lr: np.ndarray
    post1: np.ndarray
    calls: np.ndarray
    p_value: np.ndarray


def _covariances(vs: VectorSummaries, err_var, sigma_psi2):
    h = vs.contrast.h
    shapes = np.einsum("ij,gj,kj->gik", h, 1.0 / vs.n, h)
    lam0 = err_var[:, None, None] * shapes
    lam_a = sigma_psi2 * np.eye(vs.dim)
    return lam0, lam_a


def lr_appendix_form(vs: VectorSummaries, fit: MultiFitResult) -> np.ndarray:
    """``f0/f1`` in the shrinkage form, for checking :func:`lrt_multi`.

    With ``L_g = (LA + L0)^-1 LA`` and
    ``Gamma = L_g (d - H tau) + (I - L_g) H psi``,

        f0/f1 = |I - L_g|^(-1/2) exp(-Gamma' L0^-1 L_g^-1 Gamma / 2
                                     + (H psi)'(H psi) / (2 sigma_psi2)).

    The final exponent carries a plus sign; with a minus the expression
    would not equal the density ratio. Requires ``sigma_psi2 > 0``.
    """
    p = fit.params
    if p.sigma_psi2 <= 0:
        raise ValueError("the shrinkage form needs sigma_psi2 > 0")
    lam0, lam_a = _covariances(vs, fit.error_variance, p.sigma_psi2)
    total = lam0 + lam_a
    lam_g = np.linalg.solve(total, np.broadcast_to(lam_a, total.shape))
    eye = np.eye(vs.dim)
    gam = (np.einsum("gij,gj->gi", lam_g, vs.d - p.h_tau)
           + np.einsum("gij,j->gi", eye - lam_g, p.h_psi))
    quad_mat = np.linalg.solve(lam0, np.linalg.inv(lam_g))
    quad = np.einsum("gi,gij,gj->g", gam, quad_mat, gam)
    _, logdet = np.linalg.slogdet(eye - lam_g)
    return np.exp(-0.5 * logdet - 0.5 * quad + p.h_psi @ p.h_psi / (2 * p.sigma_psi2))


def lrt_multi(vs: VectorSummaries, fit: MultiFitResult, threshold: float = 0.2,
              null: str = "normal") -> MultiLR:
    """Null to non-null density ratio per gene, posteriors and local-f.d.r. calls.

    P-values refer the null quadratic form to a chi-square law with the
    plug-in variance (``null="normal"``) or, with the error variance
    integrated out, to an F law on ``(t-1, f + 2 alpha)`` df (``null="t"``).
    """
    if null not in ("normal", "t"):
        raise ValueError("null must be 'normal' or 't'")
    if len(vs) != fit.post1.size:
        raise ValueError("summaries and fit cover different numbers of genes")
    p = fit.params
    lam0, lam_a = _covariances(vs, fit.error_variance, p.sigma_psi2)
    total = lam0 + lam_a
    r0 = vs.d - p.h_tau
    r1 = r0 - p.h_psi
    _, ld0 = np.linalg.slogdet(lam0)
    _, ld1 = np.linalg.slogdet(total)
    q0 = np.einsum("gi,gi->g", r0, np.linalg.solve(lam0, r0[..., None])[..., 0])
    q1 = np.einsum("gi,gi->g", r1, np.linalg.solve(total, r1[..., None])[..., 0])
    log_lr = -0.5 * (ld0 + q0) + 0.5 * (ld1 + q1)
    with np.errstate(over="ignore"):
        lr = np.exp(log_lr)
        if p.p1 <= 0:
            post1 = np.zeros(len(vs))
        elif p.p1 >= 1:
            post1 = np.ones(len(vs))
        else:
            # p1g = 1 / (1 + (p0/p1) lr), evaluated in log space
            post1 = np.exp(-np.logaddexp(0.0, math.log(p.p0 / p.p1) + log_lr))
    if null == "normal":
        # under the null (d - H tau)' L0^-1 (d - H tau) is chi-square on t-1 df
        p_value = stats.chi2.sf(q0, vs.dim)
    else:
        h = vs.f / 2
        pred = (vs.m * h + 1 / fit.prior.beta) / (h + fit.prior.alpha)
        p_value = stats.f.sf(q0 * fit.error_variance / (vs.dim * pred), vs.dim,
                             vs.f + 2 * fit.prior.alpha)
    return MultiLR(lr=lr, log_lr=log_lr, post1=post1, calls=(1.0 - post1) < threshold,
                   p_value=p_value)
