"""Compare the compiled and numpy kernel backends.

Run with ``python3 benchmarks/bench_kernels.py [--genes 2000 20000]``. Each
row reports the best of several repeats, in milliseconds.
"""
import argparse
import timeit

import numpy as np

from ebmix import em, kernels, simulation
from ebmix.core import summarize
from ebmix.prior import fit_variance_prior


def _inputs(G, seed=0):
    rng = np.random.default_rng(seed)
    d = rng.normal(0, 1.2, G)
    var0 = 1 / rng.gamma(5, 1 / 12, G) / 3
    var1 = var0 + 1.0
    w = rng.uniform(0, 1, G)
    wr2 = w * rng.normal(0, 1.5, G) ** 2
    return d, var0, var1, w, wr2, np.ones(G)


def bench_kernels(G, repeat):
    d, var0, var1, w, wr2, a = _inputs(G)
    post1, post2 = np.empty(G), np.empty(G)
    rows = []
    for name in kernels.available_backends():
        k = kernels.get(name)
        cases = {
            "mixture_posteriors": lambda: k.mixture_posteriors(d, var0, var1, 0.0, 3.0, 0.9, 0.05,
                                                               0.05, post1, post2),
            "variance_score": lambda: k.variance_score(0.7, w, wr2, a, var0),
            "solve_variance_root": lambda: k.solve_variance_root(w, wr2, a, var0, 0.0, 100.0,
                                                                 1e-14, 1e-15, 200),
        }
        for case, fn in cases.items():
            number = max(1, int(2e5 // G))
            best = min(timeit.repeat(fn, number=number, repeat=repeat)) / number
            rows.append((G, case, name, best * 1e3))
    return rows


def bench_fit(G, repeat):
    sc = simulation.SimScenario(G=G, seed=1)
    summaries = summarize(simulation.generate(sc).data)
    prior = fit_variance_prior(summaries)
    rows = []
    for name in kernels.available_backends():
        fn = lambda: em.fit(summaries, prior, "RR", backend=name)  # noqa: E731
        best = min(timeit.repeat(fn, number=1, repeat=repeat))
        rows.append((G, "fit RR", name, best * 1e3))
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--genes", type=int, nargs="+", default=[2000, 20000])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    print(f"backends: {', '.join(kernels.available_backends())} (active: {kernels.backend()})")
    print(f"{'G':>7}  {'case':<22}{'backend':<9}{'ms':>10}")
    for G in args.genes:
        rows = bench_kernels(G, args.repeat) + bench_fit(G, max(1, args.repeat // 2))
        for G_, case, name, ms in rows:
            print(f"{G_:>7}  {case:<22}{name:<9}{ms:>10.3f}")


if __name__ == "__main__":
    main()
