# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled EM kernels.

Signatures and semantics match :mod:`ebmix._kernels_py` exactly; the two
backends differ only in summation order (sequential here, pairwise in numpy).
"""
from libc.math cimport exp, log, fabs, signbit, INFINITY

cdef double LOG_2PI = 1.8378770664093453


def mixture_posteriors(const double[::1] d, const double[::1] var0,
                       const double[::1] var1, double tau, double psi,
                       double p0, double p1, double p2,
                       double[::1] post1, double[::1] post2):
    """Posterior component probabilities and the observed-data log-likelihood.

    Components are N(tau, var0), N(tau + psi, var1) and N(tau - psi, var1)
    with weights p0, p1, p2. A zero weight removes its component.
    """
    cdef Py_ssize_t g, n = d.shape[0]
    cdef bint has0 = p0 > 0, has1 = p1 > 0, has2 = p2 > 0
    cdef double lp0 = log(p0) if has0 else -INFINITY
    cdef double lp1 = log(p1) if has1 else -INFINITY
    cdef double lp2 = log(p2) if has2 else -INFINITY
    cdef double l0, l1, l2, e0, e1, e2, mx, tot, r, lv1, total = 0.0
    with nogil:
        for g in range(n):
            l0 = -INFINITY
            l1 = -INFINITY
            l2 = -INFINITY
            if has0:
                r = d[g] - tau
                l0 = lp0 - 0.5 * (LOG_2PI + log(var0[g]) + r * r / var0[g])
            if has1 or has2:
                lv1 = log(var1[g])
                if has1:
                    r = d[g] - tau - psi
                    l1 = lp1 - 0.5 * (LOG_2PI + lv1 + r * r / var1[g])
                if has2:
                    r = d[g] - tau + psi
                    l2 = lp2 - 0.5 * (LOG_2PI + lv1 + r * r / var1[g])
            mx = l0
            if l1 > mx:
                mx = l1
            if l2 > mx:
                mx = l2
            e0 = exp(l0 - mx) if has0 else 0.0
            e1 = exp(l1 - mx) if has1 else 0.0
            e2 = exp(l2 - mx) if has2 else 0.0
            tot = e0 + e1 + e2
            post1[g] = e1 / tot
            post2[g] = e2 / tot
            total += mx + log(tot)
    return total


cdef double _score(double s, const double[::1] w, const double[::1] wr2,
                   const double[::1] a, const double[::1] b) noexcept nogil:
    cdef Py_ssize_t g, n = w.shape[0]
    cdef double v, acc = 0.0
    for g in range(n):
        v = a[g] * s + b[g]
        acc += a[g] * (wr2[g] - w[g] * v) / (v * v)
    return acc


def variance_score(double s, const double[::1] w, const double[::1] wr2,
                   const double[::1] a, const double[::1] b):
    """Twice the derivative of the weighted normal log-likelihood in ``s``.

    Each gene has variance ``a*s + b``, weight ``w`` and weighted squared
    residual ``wr2``.
    """
    return _score(s, w, wr2, a, b)


def variance_objective(double s, const double[::1] w, const double[::1] wr2,
                       const double[::1] a, const double[::1] b):
    cdef Py_ssize_t g, n = w.shape[0]
    cdef double v, acc = 0.0
    with nogil:
        for g in range(n):
            v = a[g] * s + b[g]
            acc += w[g] * log(v) + wr2[g] / v
    return -0.5 * acc


def solve_variance_root(const double[::1] w, const double[::1] wr2,
                        const double[::1] a, const double[::1] b,
                        double lo, double hi, double xtol, double rtol,
                        int maxiter):
    """Brent's method on ``variance_score`` over ``[lo, hi]``.

    The bracket must straddle a sign change. Returns ``(root, iterations,
    converged)``.
    """
    cdef double xpre = lo, xcur = hi, xblk = 0.0
    cdef double fpre, fcur, fblk = 0.0
    cdef double spre = 0.0, scur = 0.0, sbis, delta, stry, dpre, dblk
    cdef int i
    fpre = _score(xpre, w, wr2, a, b)
    fcur = _score(xcur, w, wr2, a, b)
    if fpre * fcur > 0:
        raise ValueError("bracket does not straddle a sign change")
    if fpre == 0:
        return xpre, 0, True
    if fcur == 0:
        return xcur, 0, True
    with nogil:
        for i in range(maxiter):
            if fpre != 0 and fcur != 0 and signbit(fpre) != signbit(fcur):
                xblk = xpre
                fblk = fpre
                scur = xcur - xpre
                spre = scur
            if fabs(fblk) < fabs(fcur):
                xpre = xcur
                xcur = xblk
                xblk = xpre
                fpre = fcur
                fcur = fblk
                fblk = fpre
            delta = (xtol + rtol * fabs(xcur)) / 2
            sbis = (xblk - xcur) / 2
            if fcur == 0 or fabs(sbis) < delta:
                with gil:
                    return xcur, i + 1, True
            if fabs(spre) > delta and fabs(fcur) < fabs(fpre):
                if xpre == xblk:
                    stry = -fcur * (xcur - xpre) / (fcur - fpre)
                else:
                    dpre = (fpre - fcur) / (xpre - xcur)
                    dblk = (fblk - fcur) / (xblk - xcur)
                    stry = -fcur * (fblk * dblk - fpre * dpre) / (dblk * dpre * (fblk - fpre))
                if 2 * fabs(stry) < min(fabs(spre), 3 * fabs(sbis) - delta):
                    spre = scur
                    scur = stry
                else:
                    spre = sbis
                    scur = sbis
            else:
                spre = sbis
                scur = sbis
            xpre = xcur
            fpre = fcur
            if fabs(scur) > delta:
                xcur += scur
            elif sbis > 0:
                xcur += delta
            else:
                xcur -= delta
            fcur = _score(xcur, w, wr2, a, b)
    return xcur, maxiter, False
