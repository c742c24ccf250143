"""Pure-numpy implementation of the EM kernels (fallback backend)."""
import numpy as np
from scipy import optimize

LOG_2PI = np.log(2 * np.pi)


def mixture_posteriors(d, var0, var1, tau, psi, p0, p1, p2, post1, post2):
    with np.errstate(divide="ignore"):
        lp = np.log([p0, p1, p2])
    l0 = lp[0] - 0.5 * (LOG_2PI + np.log(var0) + (d - tau) ** 2 / var0)
    l1 = lp[1] - 0.5 * (LOG_2PI + np.log(var1) + (d - tau - psi) ** 2 / var1)
    l2 = lp[2] - 0.5 * (LOG_2PI + np.log(var1) + (d - tau + psi) ** 2 / var1)
    mx = np.maximum(np.maximum(l0, l1), l2)
    e0 = np.exp(l0 - mx)
    e1 = np.exp(l1 - mx)
    e2 = np.exp(l2 - mx)
    tot = e0 + e1 + e2
    post1[:] = e1 / tot
    post2[:] = e2 / tot
    return float(np.sum(mx + np.log(tot)))


def variance_score(s, w, wr2, a, b):
    v = a * s + b
    return float(np.sum(a * (wr2 - w * v) / (v * v)))


def variance_objective(s, w, wr2, a, b):
    v = a * s + b
    return float(-0.5 * np.sum(w * np.log(v) + wr2 / v))


def solve_variance_root(w, wr2, a, b, lo, hi, xtol, rtol, maxiter):
    root, info = optimize.brentq(
        variance_score, lo, hi, args=(w, wr2, a, b),
        xtol=xtol, rtol=rtol, maxiter=maxiter, full_output=True, disp=False,
    )
    return root, info.iterations, info.converged
