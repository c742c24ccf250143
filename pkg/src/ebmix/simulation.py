"""Simulation studies: data generators, the optimal-rule oracle and performance metrics.

Two generators are provided. Under ``LEMMA`` the non-null effects are
``N(psi, sigma_psi2)``; under ``LIMMA`` they are ``N(psi, v0 sigma2_eps_g)``.
Both draw gene error variances from the inverse-gamma prior (or a log-normal
law with the same mean and variance) and produce two groups of replicates
per gene.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import em, inference
from .core import ExpressionMatrix, GeneSummaries, ModelKind, summarize
from .prior import PriorFitError, VariancePrior, fit_variance_prior

GENERATORS = ("LEMMA", "LIMMA")
VARIANCE_LAWS = ("inverse-gamma", "log-normal")
RANDOM_METHODS = ("RR", "RG", "RF", "RH")
FIXED_METHODS = ("FR", "FF", "FH")
ALL_METHODS = RANDOM_METHODS + FIXED_METHODS + ("OR",)
DEFAULT_THRESHOLDS = tuple(np.round(np.arange(0, 0.501, 0.05), 2))

LOW_VARIABILITY = {"alpha": 5.0, "beta": 1 / 12}
HIGH_VARIABILITY = {"alpha": 2.1, "beta": 10 / 33}


@dataclass(frozen=True)
class SimScenario:
    """One cell of a simulation design.

    ``psi`` and ``sigma_psi2`` set the LEMMA effect law, ``psi`` and ``v0``
    the LIMMA one. ``p2 > 0`` adds genes with effects centred at ``-psi``.
    Exactly ``round(p1 G)`` (and ``round(p2 G)``) genes are non-null.
    """

    generator: str = "LEMMA"
    G: int = 2000
    S: int = 25
    p1: float = 0.05
    p2: float = 0.0
    psi: float = 3.0
    sigma_psi2: float = 1.0
    v0: float = 1.0
    tau: float = 0.0
    n1: int = 6
    n2: int = 6
    alpha: float = 5.0
    beta: float = 1 / 12
    variance_law: str = "inverse-gamma"
    seed: int = 0
    name: str = ""

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ValueError(f"generator must be one of {GENERATORS}")
        if self.variance_law not in VARIANCE_LAWS:
            raise ValueError(f"variance_law must be one of {VARIANCE_LAWS}")
        if not (0 <= self.p1 <= 1 and 0 <= self.p2 <= 1 and self.p1 + self.p2 <= 1):
            raise ValueError("invalid mixture probabilities")
        if self.G < 1 or self.S < 1:
            raise ValueError("G and S must be positive")
        if self.n1 < 1 or self.n2 < 1 or self.n1 + self.n2 < 3:
            raise ValueError("need at least one residual degree of freedom")
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")
        if self.variance_law == "log-normal" and self.alpha <= 2:
            raise ValueError("the log-normal law matches two moments and needs alpha > 2")
        if self.sigma_psi2 < 0 or self.v0 < 0:
            raise ValueError("effect variances must be nonnegative")

    @property
    def n_nonnull(self) -> tuple[int, int]:
        return int(round(self.p1 * self.G)), int(round(self.p2 * self.G))

    @property
    def true_kind(self) -> ModelKind:
        return ModelKind.RR if self.generator == "LEMMA" else ModelKind.RG

    @property
    def label(self) -> str:
        return self.name or f"{self.generator}-psi{self.psi:g}-p{self.p1:g}"

    def true_params(self) -> em.MixtureParams:
        spread = ({"sigma_psi2": self.sigma_psi2} if self.generator == "LEMMA"
                  else {"v0": self.v0})
        return em.MixtureParams(p1=self.p1, p2=self.p2, tau=self.tau, psi=self.psi, **spread)

    def true_prior(self) -> VariancePrior:
        return VariancePrior(self.alpha, self.beta, "fixed")


@dataclass(frozen=True)
class SimData:
    """One generated data set with its truth."""

    data: ExpressionMatrix
    labels: np.ndarray
    error_variance: np.ndarray
    effects: np.ndarray
    scenario: SimScenario

    @property
    def nonnull(self) -> np.ndarray:
        return self.labels > 0


def _draw_error_variances(sc: SimScenario, rng: np.random.Generator) -> np.ndarray:
    if sc.variance_law == "inverse-gamma":
        return 1.0 / rng.gamma(sc.alpha, sc.beta, sc.G)
    mean = 1.0 / ((sc.alpha - 1) * sc.beta)
    s2 = math.log1p(1.0 / (sc.alpha - 2))
    return rng.lognormal(math.log(mean) - s2 / 2, math.sqrt(s2), sc.G)


def generate(scenario: SimScenario, rng: np.random.Generator | int | None = None) -> SimData:
    """Draw one data set from the scenario.

    ``rng`` defaults to a generator seeded with ``scenario.seed``.
    """
    sc = scenario
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(sc.seed if rng is None else int(rng))
    sigma2 = _draw_error_variances(sc, rng)
    k1, k2 = sc.n_nonnull
    labels = np.zeros(sc.G, dtype=int)
    labels[:k1] = 1
    labels[k1:k1 + k2] = 2
    rng.shuffle(labels)
    centre = np.where(labels == 1, sc.psi, np.where(labels == 2, -sc.psi, 0.0))
    if sc.generator == "LEMMA":
        sd = np.full(sc.G, math.sqrt(sc.sigma_psi2))
    else:
        sd = np.sqrt(sc.v0 * sigma2)
    effects = np.where(labels > 0, centre + sd * rng.standard_normal(sc.G), 0.0)
    noise_sd = np.sqrt(sigma2)[:, None]
    y1 = (sc.tau + effects)[:, None] / 2 + noise_sd * rng.standard_normal((sc.G, sc.n1))
    y2 = -(sc.tau + effects)[:, None] / 2 + noise_sd * rng.standard_normal((sc.G, sc.n2))
    values = np.hstack([y1, y2])
    groups = ("1",) * sc.n1 + ("2",) * sc.n2
    data = ExpressionMatrix(values, groups, tuple(f"g{i + 1}" for i in range(sc.G)), ("1", "2"))
    return SimData(data=data, labels=labels, error_variance=sigma2, effects=effects, scenario=sc)


def optimal_rule(sim: SimData, summaries: GeneSummaries | None = None) -> em.FitResult:
    """Posteriors and likelihood ratios with every parameter at its true value.

    Uses the generating model (RR for LEMMA, RG for LIMMA) with the true
    mixture parameters and the true ``(alpha, beta)``. Only available for
    simulated data.
    """
    if not isinstance(sim, SimData):
        raise TypeError("the optimal rule needs simulated data with known parameters")
    sc = sim.scenario
    summaries = summaries if summaries is not None else summarize(sim.data)
    return em.fit_at(summaries, sc.true_prior(), sc.true_params(), sc.true_kind)


def empirical_power(null_stats, nonnull_stats, size: float = 0.05) -> float:
    """Fraction of non-null statistics above the ``1 - size`` quantile of the null ones."""
    null_stats = np.asarray(null_stats, dtype=float).ravel()
    nonnull_stats = np.asarray(nonnull_stats, dtype=float).ravel()
    if null_stats.size == 0:
        raise ValueError("no null statistics to calibrate the critical value")
    if nonnull_stats.size == 0:
        raise ValueError("no non-null statistics")
    crit = np.quantile(null_stats, 1 - size)
    return float(np.mean(nonnull_stats > crit))


def power_from_truth(statistics, truth, size: float = 0.05) -> float:
    """:func:`empirical_power` with statistics split by a boolean truth vector."""
    stats_ = np.asarray(statistics, dtype=float)
    truth = np.asarray(truth, dtype=bool)
    return empirical_power(stats_[~truth], stats_[truth], size)


@dataclass(frozen=True)
class CurvePoint:
    threshold: float
    accuracy: float
    fdr: float
    tp: int
    fp: int
    tn: int
    fn: int


def classify_at(local_fdr, threshold: float) -> np.ndarray:
    """Calls at a local-f.d.r. threshold: ``lfdr < threshold``, everything at threshold >= 1."""
    local_fdr = np.asarray(local_fdr, dtype=float)
    if threshold >= 1:
        return np.ones(local_fdr.size, dtype=bool)
    return local_fdr < threshold


def accuracy_fdr_curves(local_fdr, truth, thresholds=DEFAULT_THRESHOLDS) -> list[CurvePoint]:
    """Accuracy ``(TP+TN)/G`` and FDR ``FP/(FP+TP)`` over thresholds.

    The FDR with no calls is reported as 0.
    """
    truth = np.asarray(truth, dtype=bool)
    local_fdr = np.asarray(local_fdr, dtype=float)
    if local_fdr.shape != truth.shape:
        raise ValueError("local_fdr and truth differ in length")
    out = []
    for c in thresholds:
        calls = classify_at(local_fdr, float(c))
        tp = int(np.sum(calls & truth))
        fp = int(np.sum(calls & ~truth))
        tn = int(np.sum(~calls & ~truth))
        fn = int(np.sum(~calls & truth))
        fdr = fp / (fp + tp) if fp + tp else 0.0
        out.append(CurvePoint(float(c), (tp + tn) / truth.size, fdr, tp, fp, tn, fn))
    return out


@dataclass
class ReplicateResult:
    """Statistics and fitted parameters from one replicate."""

    index: int
    truth: np.ndarray
    statistics: dict = field(default_factory=dict)
    local_fdr: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)


def method_statistic(summaries: GeneSummaries, prior: VariancePrior | None, method: str,
                     config: em.EmConfig | None = None):
    """Fit one procedure and return ``(statistic, local_fdr or None, params or None)``.

    Larger statistics are stronger evidence against the null: ``-log(f0/f1)``
    for the mixture fits and ``|d - tau|/sigma`` for the fixed-mean analogs.
    """
    kind = ModelKind.parse(method)
    if kind.random_mean:
        fit = em.fit(summaries, prior, kind, config)
        lr = inference.likelihood_ratio(summaries, fit)
        return -lr.log_lr, fit.local_fdr, fit.params
    stat = np.abs(inference.fixed_effect_statistic(summaries, prior, kind))
    return stat, None, None


def run_replicate(scenario: SimScenario, index: int, seed_seq: np.random.SeedSequence,
                  methods=ALL_METHODS, config: em.EmConfig | None = None) -> ReplicateResult:
    sim = generate(scenario, np.random.default_rng(seed_seq))
    summaries = summarize(sim.data)
    out = ReplicateResult(index=index, truth=sim.nonnull)
    prior = None
    if any(ModelKind.parse(m).variance_law == "random" for m in methods if m != "OR"):
        try:
            prior = fit_variance_prior(summaries)
            out.params["prior"] = prior
        except PriorFitError as exc:
            out.failures["prior"] = str(exc)
    for method in methods:
        try:
            if method == "OR":
                fit = optimal_rule(sim, summaries)
                out.statistics[method] = -inference.likelihood_ratio(summaries, fit).log_lr
                out.local_fdr[method] = fit.local_fdr
                continue
            kind = ModelKind.parse(method)
            if kind.variance_law == "random" and prior is None:
                raise PriorFitError("variance prior unavailable")
            stat, lfdr, params = method_statistic(summaries, prior, method, config)
            out.statistics[method] = stat
            if lfdr is not None:
                out.local_fdr[method] = lfdr
                out.params[method] = params
        except (ArithmeticError, ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
            out.failures[method] = f"{type(exc).__name__}: {exc}"
    return out


@dataclass
class StudyReport:
    """Long-format records plus the replicate-level results."""

    records: list
    replicates: dict
    manifest: dict

    def value(self, scenario: str, method: str, metric: str, threshold=None) -> float:
        for r in self.records:
            if (r["scenario"] == scenario and r["method"] == method and r["metric"] == metric
                    and (threshold is None or r["threshold"] == threshold)):
                return r["value"]
        raise KeyError((scenario, method, metric, threshold))


def _summarize_scenario(scenario: SimScenario, reps: list[ReplicateResult], methods,
                        thresholds, size) -> list[dict]:
    records = []
    label = scenario.label

    def add(method, metric, value, threshold=""):
        records.append({"scenario": label, "method": method, "threshold": threshold,
                        "metric": metric, "value": float(value)})

    for method in methods:
        ok = [r for r in reps if method in r.statistics]
        add(method, "failures", len(reps) - len(ok))
        if not ok:
            continue
        stats_ = np.concatenate([r.statistics[method] for r in ok])
        truth = np.concatenate([r.truth for r in ok])
        if truth.any() and (~truth).any():
            add(method, "power", power_from_truth(stats_, truth, size), size)
        with_post = [r for r in ok if method in r.local_fdr]
        if with_post:
            for i, c in enumerate(thresholds):
                pts = [accuracy_fdr_curves(r.local_fdr[method], r.truth, [c])[0]
                       for r in with_post]
                add(method, "accuracy", np.mean([p.accuracy for p in pts]), float(c))
                add(method, "fdr", np.mean([p.fdr for p in pts]), float(c))
        fitted = [r.params[method] for r in ok if method in r.params]
        if fitted:
            for key in ("p1", "tau", "psi", "sigma_psi2", "v0"):
                vals = [getattr(p, key) for p in fitted if getattr(p, key) is not None]
                if vals:
                    add(method, f"median_{key}", np.median(vals))
    priors = [r.params["prior"] for r in reps if "prior" in r.params]
    if priors:
        add("prior", "median_alpha", np.median([p.alpha for p in priors]))
        add("prior", "median_beta", np.median([p.beta for p in priors]))
    return records


def run_study(scenarios, methods=ALL_METHODS, *, thresholds=DEFAULT_THRESHOLDS,
              size: float = 0.05, config: em.EmConfig | None = None,
              threads: int | None = None) -> StudyReport:
    """Run every scenario with ``S`` replicates each and aggregate the metrics.

    Replicate ``s`` of a scenario uses the ``s``-th child of
    ``SeedSequence(scenario.seed)``, so results do not depend on the thread
    count. Failed fits are counted per method and the study continues.
    """
    if isinstance(scenarios, SimScenario):
        scenarios = [scenarios]
    methods = tuple(methods)
    for m in methods:
        if m not in ALL_METHODS:
            raise ValueError(f"unknown method {m!r}")
    records, replicates, manifest = [], {}, {"methods": list(methods), "size": size,
                                             "thresholds": [float(c) for c in thresholds],
                                             "scenarios": []}
    with ThreadPoolExecutor(max_workers=threads) as pool:
        for sc in scenarios:
            children = np.random.SeedSequence(sc.seed).spawn(sc.S)
            futures = [pool.submit(run_replicate, sc, s, children[s], methods, config)
                       for s in range(sc.S)]
            reps = [f.result() for f in futures]
            replicates[sc.label] = reps
            records.extend(_summarize_scenario(sc, reps, methods, thresholds, size))
            manifest["scenarios"].append({**asdict(sc), "label": sc.label,
                                          "spawn_keys": [list(c.spawn_key) for c in children]})
    return StudyReport(records=records, replicates=replicates, manifest=manifest)


def scenario_grid(base: SimScenario, **axes) -> list[SimScenario]:
    """Cartesian product of scenario fields, e.g. ``psi=range(7)``."""
    grid = [base]
    for key, values in axes.items():
        grid = [replace(sc, **{key: v}) for sc in grid for v in values]
    return [replace(sc, name=_auto_name(base.name or sc.generator, sc, axes)) for sc in grid]


def _auto_name(prefix: str, sc: SimScenario, axes) -> str:
    return "-".join([prefix] + [f"{k}={getattr(sc, k):g}" for k in axes])
