"""Command-line interface: ``ebmix fit | simulate | classify | report``.

Settings come from built-in defaults, then an optional JSON config file,
then explicit flags. Exit codes: 0 success, 1 usage or configuration error,
2 invalid input data, 3 numerical failure (including non-convergence, in
which case the EM trace is written next to the other outputs).
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import warnings
from pathlib import Path

import numpy as np
from scipy import stats

from . import __version__, dataio, em, inference, multi, simulation
from .core import DataValidationError, ModelKind, paired_summarize, summarize
from .prior import PriorFitError, fit_variance_prior, fit_variance_prior_moments

log = logging.getLogger("ebmix")

SCHEMA_VERSION = 1
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DEFAULTS = {
    "fit": {
        "input": None, "out": ".", "format": None, "groups": None, "group_file": None,
        "paired": False, "model": "rr", "components": None, "contrast": "helmert",
        "prior_method": "ml", "variance_plugin": "mode", "null": "normal", "tol": 1e-8,
        "max_iters": 2000, "local_fdr": 0.2, "fdr": 0.05, "min_effect": 0.0, "seed": 0,
        "threads": None,
    },
    "simulate": {
        "out": ".", "generator": "LEMMA", "genes": 2000, "replicates": 25, "p1": [0.05],
        "p2": 0.0, "psi": [3.0], "sigma_psi2": 1.0, "v0": [1.0], "tau": 0.0, "n1": 6,
        "n2": 6, "variability": "low", "alpha": None, "beta": None,
        "variance_law": "inverse-gamma", "methods": list(simulation.ALL_METHODS),
        "tol": 1e-8, "max_iters": 2000, "seed": 0, "threads": None,
    },
    "classify": {"fit_dir": None, "out": None, "local_fdr": 0.2, "fdr": 0.05, "min_effect": 0.0},
    "report": {"source": None, "out": None, "grid_points": 201},
}


class UsageError(Exception):
    pass


class NumericalFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _str_list(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ebmix", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"ebmix {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    S = argparse.SUPPRESS

    def common(p, *names):
        p.add_argument("-v", "--verbose", action="count", default=S)
        if "config" in names:
            p.add_argument("--config", help="JSON file of settings; flags override it")
        if "decision" in names:
            p.add_argument("--local-fdr", type=float, default=S, dest="local_fdr",
                           help="local f.d.r. threshold (default 0.2)")
            p.add_argument("--fdr", type=float, default=S, help="BH level q* (default 0.05)")
            p.add_argument("--min-effect", type=float, default=S, dest="min_effect",
                           help="also require |d - tau| >= this (default 0)")
        if "em" in names:
            p.add_argument("--tol", type=float, default=S)
            p.add_argument("--max-iters", type=int, default=S, dest="max_iters")
        if "run" in names:
            p.add_argument("--seed", type=int, default=S)
            p.add_argument("--threads", type=int, default=S)

    p = sub.add_parser("fit", help="fit the mixture model to an expression table")
    p.add_argument("input", nargs="?", default=S)
    p.add_argument("-o", "--out", default=S, help="output directory")
    p.add_argument("--format", choices=["csv", "tsv"], default=S)
    p.add_argument("--groups", type=_str_list, default=S,
                   help="group label per sample column, e.g. A,A,B,B")
    p.add_argument("--group-file", default=S, dest="group_file",
                   help="two-column sample,group mapping")
    p.add_argument("--paired", action="store_true", default=S,
                   help="columns are within-pair differences (one group)")
    p.add_argument("--model", choices=["rr", "rg", "rf", "rh"], default=S)
    p.add_argument("--components", type=int, choices=[2, 3], default=S)
    p.add_argument("--contrast", default=S, help="'helmert' or a CSV file of contrast rows")
    p.add_argument("--prior-method", choices=["ml", "moments"], default=S, dest="prior_method")
    p.add_argument("--variance-plugin", choices=list(em.PLUGINS), default=S,
                   dest="variance_plugin")
    p.add_argument("--null", choices=list(inference.NULL_DISTRIBUTIONS), default=S,
                   help="p-value reference: plug-in normal (default) or predictive t")
    common(p, "config", "decision", "em", "run")

    p = sub.add_parser("simulate", help="run a simulation study")
    p.add_argument("-o", "--out", default=S)
    p.add_argument("--generator", choices=list(simulation.GENERATORS), default=S)
    p.add_argument("--genes", type=int, default=S)
    p.add_argument("--replicates", type=int, default=S)
    p.add_argument("--p1", type=_float_list, default=S)
    p.add_argument("--p2", type=float, default=S)
    p.add_argument("--psi", type=_float_list, default=S)
    p.add_argument("--sigma-psi2", type=float, default=S, dest="sigma_psi2")
    p.add_argument("--v0", type=_float_list, default=S)
    p.add_argument("--tau", type=float, default=S)
    p.add_argument("--n1", type=int, default=S)
    p.add_argument("--n2", type=int, default=S)
    p.add_argument("--variability", choices=["low", "high"], default=S)
    p.add_argument("--alpha", type=float, default=S)
    p.add_argument("--beta", type=float, default=S)
    p.add_argument("--variance-law", choices=list(simulation.VARIANCE_LAWS), default=S,
                   dest="variance_law")
    p.add_argument("--methods", type=_str_list, default=S)
    common(p, "config", "em", "run")

    p = sub.add_parser("classify", help="re-apply decision thresholds to a fit")
    p.add_argument("fit_dir", nargs="?", default=S)
    p.add_argument("-o", "--out", default=S)
    common(p, "config", "decision")

    p = sub.add_parser("report", help="plot-ready curves from a fit or a study")
    p.add_argument("source", nargs="?", default=S, help="fit or simulate output directory")
    p.add_argument("-o", "--out", default=S)
    p.add_argument("--grid-points", type=int, default=S, dest="grid_points")
    common(p, "config")
    return parser


def resolve_settings(command: str, namespace: argparse.Namespace) -> dict:
    """Defaults, overlaid by the config file, overlaid by explicit flags."""
    settings = dict(DEFAULTS[command])
    flags = {k: v for k, v in vars(namespace).items()
             if k not in ("command", "config", "verbose")}
    config_path = getattr(namespace, "config", None)
    if config_path:
        try:
            loaded = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {config_path}: {exc}") from None
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(loaded) - set(settings))
        if unknown:
            raise UsageError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
        settings.update(loaded)
    settings.update(flags)
    _validate(command, settings)
    return settings


def _validate(command: str, s: dict) -> None:
    def need(cond, msg):
        if not cond:
            raise UsageError(msg)

    if command in ("fit", "classify"):
        for key in ("local_fdr", "fdr"):
            need(isinstance(s[key], (int, float)) and 0 <= s[key] <= 1, f"{key} must lie in [0, 1]")
        need(isinstance(s["min_effect"], (int, float)) and s["min_effect"] >= 0,
             "min_effect must be nonnegative")
    if command in ("fit", "simulate"):
        need(isinstance(s["tol"], (int, float)) and s["tol"] > 0, "tol must be positive")
        need(isinstance(s["max_iters"], int) and s["max_iters"] >= 1, "max_iters must be >= 1")
        need(s["threads"] is None or (isinstance(s["threads"], int) and s["threads"] >= 1),
             "threads must be a positive integer")
    if command == "fit":
        need(s["input"], "fit needs an input file")
        need(str(s["model"]).lower() in ("rr", "rg", "rf", "rh"), "model must be rr, rg, rf or rh")
        need(s["components"] in (None, 2, 3), "components must be 2 or 3")
        need(s["prior_method"] in ("ml", "moments"), "prior_method must be ml or moments")
        need(s["variance_plugin"] in em.PLUGINS, f"variance_plugin must be one of {em.PLUGINS}")
        need(s["null"] in inference.NULL_DISTRIBUTIONS,
             f"null must be one of {inference.NULL_DISTRIBUTIONS}")
        need(not (s["groups"] and s["group_file"]), "give --groups or --group-file, not both")
        if s["components"] == 3:
            need(str(s["model"]).lower() in ("rr", "rg"),
                 "the three-groups mixture needs model rr or rg")
    if command == "simulate":
        for m in s["methods"]:
            need(m in simulation.ALL_METHODS, f"unknown method {m!r}")
        need(s["variability"] in ("low", "high"), "variability must be low or high")
    if command == "classify":
        need(s["fit_dir"], "classify needs a fit directory")
    if command == "report":
        need(s["source"], "report needs a fit or study directory")
        need(isinstance(s["grid_points"], int) and s["grid_points"] >= 2, "grid_points must be >= 2")


# ---------------------------------------------------------------- fit

def _load_contrast(spec: str, t: int) -> multi.ContrastMatrix:
    if spec == "helmert":
        return multi.helmert(t)
    try:
        h = np.loadtxt(spec, delimiter=",", ndmin=2)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read contrast file {spec}: {exc}") from None
    try:
        c = multi.ContrastMatrix(h)
    except ValueError as exc:
        raise DataValidationError(f"contrast file {spec}: {exc}") from None
    if c.t != t:
        raise DataValidationError(f"contrast file has {c.t} columns for {t} groups")
    return c


def _read_input(s: dict):
    groups = s["groups"]
    if s["group_file"]:
        groups = dataio.read_group_file(s["group_file"])
    one = "diff" if s["paired"] and groups is None else None
    return dataio.ingest(s["input"], s["format"], groups, one_group=one)


def _fit_prior(summaries, method: str):
    if method == "moments":
        return fit_variance_prior_moments(summaries)
    return fit_variance_prior(summaries)


def _trace_payload(trace) -> dict:
    return {"loglik": list(trace.loglik), "max_change": list(trace.max_change),
            "p1": [p.p1 for p in trace.params]}


def _prior_payload(prior):
    if prior is None:
        return None
    return {"alpha": prior.alpha, "beta": prior.beta, "method": prior.method}


def cmd_fit(s: dict) -> int:
    out = Path(s["out"])
    data = _read_input(s)
    kind = ModelKind.parse(s["model"])
    decision = inference.DecisionConfig(s["local_fdr"], s["fdr"], s["min_effect"], s["null"])
    if s["paired"] or data.n_groups == 2:
        summaries = paired_summarize(data) if s["paired"] else summarize(data)
        components = s["components"] or (3 if kind in (ModelKind.RR, ModelKind.RG) else 2)
        prior = _fit_prior(summaries, s["prior_method"]) if kind.variance_law == "random" else None
        config = em.EmConfig(max_iters=s["max_iters"], tol=s["tol"], component_count=components,
                             variance_plugin=s["variance_plugin"])
        fit = em.fit(summaries, prior, kind, config)
        table = inference.decide(summaries, fit, decision)
        columns = {
            "gene_id": list(summaries.gene_ids), "d": summaries.d, "m": summaries.m,
            "sigma2_g": fit.null_variance, "sigma2_nonnull": fit.nonnull_variance,
            "p1": fit.post1, "p2": fit.post2,
            "local_fdr": table.local_fdr, "t_post": table.t_post, "lr": table.lr,
            "p_value": table.p_value, "bh_adjusted": table.bh_adjusted,
            "call_local": table.call_local, "call_fdr": table.call_fdr,
        }
        params = fit.params.as_dict()
        layout = "two-group" if not s["paired"] else "paired"
    elif data.n_groups > 2:
        if kind is not ModelKind.RR:
            raise UsageError("more than two groups are fitted with model rr only")
        if s["components"] == 3:
            raise UsageError("more than two groups are fitted with the two-groups mixture only")
        contrast = _load_contrast(s["contrast"], data.n_groups)
        summaries = multi.summarize_multi(data, contrast)
        prior = _fit_prior(summaries, s["prior_method"])
        config = em.EmConfig(max_iters=s["max_iters"], tol=s["tol"])
        fit = multi.fit_multi(summaries, prior, config)
        lrt = multi.lrt_multi(summaries, fit, decision.local_fdr_threshold,
                              decision.null_distribution)
        bh_calls, adjusted = inference.bh_procedure(lrt.p_value, decision.fdr_level)
        big = np.linalg.norm(summaries.d - fit.params.h_tau, axis=1) >= decision.min_abs_effect
        columns = {"gene_id": list(summaries.gene_ids)}
        for j in range(summaries.dim):
            columns[f"d{j + 1}"] = summaries.d[:, j]
        columns.update({
            "m": summaries.m, "sigma2_eps": fit.error_variance, "p1": fit.post1,
            "local_fdr": fit.local_fdr, "lr": lrt.lr, "p_value": lrt.p_value,
            "bh_adjusted": adjusted, "call_local": lrt.calls & big, "call_fdr": bh_calls & big,
        })
        params = {"p1": fit.params.p1, "h_tau": fit.params.h_tau, "h_psi": fit.params.h_psi,
                  "sigma_psi2": fit.params.sigma_psi2}
        components = 2
        layout = "multi-group"
    else:
        raise DataValidationError("one group of samples: pass --paired for within-pair differences")

    out.mkdir(parents=True, exist_ok=True)
    dataio.write_table(out / "genes.csv", columns)
    payload = {
        "schema_version": SCHEMA_VERSION, "layout": layout, "model": kind.value,
        "components": components, "n_genes": len(summaries), "groups": list(data.groups),
        "params": params, "prior": _prior_payload(prior), "converged": fit.converged,
        "n_iter": fit.n_iter, "loglik": fit.loglik,
        "final_max_change": fit.trace.max_change[-1],
        "decision": {"local_fdr": decision.local_fdr_threshold, "fdr": decision.fdr_level,
                     "min_effect": decision.min_abs_effect, "null": decision.null_distribution},
        "counts": {"local_fdr": int(np.sum(columns["call_local"])),
                   "fdr": int(np.sum(columns["call_fdr"]))},
    }
    if layout == "multi-group":
        payload["contrast"] = summaries.contrast.h
    dataio.write_json(out / "fit.json", payload)
    if not fit.converged:
        dataio.write_json(out / "trace.json", _trace_payload(fit.trace))
        raise NumericalFailure(f"EM did not converge in {s['max_iters']} iterations; "
                               f"trace written to {out / 'trace.json'}")
    log.info("p1 = %.4g; %d local-f.d.r. calls, %d FDR calls", params["p1"],
             payload["counts"]["local_fdr"], payload["counts"]["fdr"])
    return EXIT_OK


# ---------------------------------------------------------------- classify

def cmd_classify(s: dict) -> int:
    src = Path(s["fit_dir"])
    out = Path(s["out"] or src)
    try:
        meta = json.loads((src / "fit.json").read_text())
        cols = dataio.read_table(src / "genes.csv")
    except (OSError, json.JSONDecodeError) as exc:
        raise DataValidationError(f"cannot read fit in {src}: {exc}") from None
    decision = inference.DecisionConfig(s["local_fdr"], s["fdr"], s["min_effect"])
    lfdr = np.array(cols["local_fdr"], dtype=float)
    pvals = np.array(cols["p_value"], dtype=float)
    if meta["layout"] == "multi-group":
        d = np.column_stack([np.array(cols[k], dtype=float) for k in cols if k[:1] == "d"
                             and k[1:].isdigit()])
        effect = np.linalg.norm(d - np.asarray(meta["params"]["h_tau"]), axis=1)
    else:
        effect = np.abs(np.array(cols["d"], dtype=float) - meta["params"]["tau"])
    big = effect >= decision.min_abs_effect
    bh_calls, adjusted = inference.bh_procedure(pvals, decision.fdr_level)
    cols["bh_adjusted"] = list(adjusted)
    cols["call_local"] = list((lfdr < decision.local_fdr_threshold) & big)
    cols["call_fdr"] = list(bh_calls & big)
    out.mkdir(parents=True, exist_ok=True)
    dataio.write_table(out / "genes.csv", cols)
    meta["decision"] = {"local_fdr": decision.local_fdr_threshold, "fdr": decision.fdr_level,
                        "min_effect": decision.min_abs_effect,
                        "null": meta.get("decision", {}).get("null", "normal")}
    meta["counts"] = {"local_fdr": int(np.sum(cols["call_local"])),
                      "fdr": int(np.sum(cols["call_fdr"]))}
    dataio.write_json(out / "fit.json", meta)
    log.info("%d local-f.d.r. calls, %d FDR calls", meta["counts"]["local_fdr"],
             meta["counts"]["fdr"])
    return EXIT_OK


# ---------------------------------------------------------------- simulate

def cmd_simulate(s: dict) -> int:
    out = Path(s["out"])
    level = simulation.LOW_VARIABILITY if s["variability"] == "low" else simulation.HIGH_VARIABILITY
    alpha = s["alpha"] if s["alpha"] is not None else level["alpha"]
    beta = s["beta"] if s["beta"] is not None else level["beta"]
    try:
        base = simulation.SimScenario(
            generator=s["generator"], G=s["genes"], S=s["replicates"], p1=s["p1"][0],
            p2=s["p2"], psi=s["psi"][0], sigma_psi2=s["sigma_psi2"], v0=s["v0"][0],
            tau=s["tau"], n1=s["n1"], n2=s["n2"], alpha=alpha, beta=beta,
            variance_law=s["variance_law"], seed=s["seed"])
        axes = {"p1": s["p1"], "psi": s["psi"]}
        if s["generator"] == "LIMMA":
            axes["v0"] = s["v0"]
        grid = simulation.scenario_grid(base, **axes)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    config = em.EmConfig(max_iters=s["max_iters"], tol=s["tol"])
    threads = s["threads"] or os.cpu_count() or 1
    report = simulation.run_study(grid, s["methods"], config=config, threads=threads)
    out.mkdir(parents=True, exist_ok=True)
    dataio.write_records(out / "study.csv", report.records,
                         ["scenario", "method", "threshold", "metric", "value"])
    manifest = dict(report.manifest, schema_version=SCHEMA_VERSION, command="simulate",
                    settings={k: v for k, v in s.items() if k not in ("out", "threads")})
    dataio.write_json(out / "manifest.json", manifest)
    return EXIT_OK


# ---------------------------------------------------------------- report

def _density_report(src: Path, out: Path, points: int) -> None:
    meta = json.loads((src / "fit.json").read_text())
    if meta["layout"] == "multi-group":
        raise DataValidationError("the density report needs a two-group or paired fit")
    cols = dataio.read_table(src / "genes.csv")
    d = np.array(cols["d"], dtype=float)
    sd0 = np.sqrt(np.array(cols["sigma2_g"], dtype=float))
    sd1 = np.sqrt(np.array(cols["sigma2_nonnull"], dtype=float))
    p = meta["params"]
    p1, p2 = p["p1"], p.get("p2", 0.0)
    p0 = max(0.0, 1 - p1 - p2)
    lo, hi = float(d.min()), float(d.max())
    pad = 0.1 * (hi - lo) if hi > lo else 1.0
    grid = np.linspace(lo - pad, hi + pad, points)
    # gene-averaged component densities: the marginal density of a random gene's d
    f0 = stats.norm.pdf(grid[:, None], p["tau"], sd0).mean(axis=1)
    f1 = stats.norm.pdf(grid[:, None], p["tau"] + p["psi"], sd1).mean(axis=1)
    f2 = stats.norm.pdf(grid[:, None], p["tau"] - p["psi"], sd1).mean(axis=1)
    counts, edges = np.histogram(d, bins=min(50, max(5, int(math.sqrt(d.size)))),
                                 range=(grid[0], grid[-1]), density=True)
    hist = counts[np.clip(np.searchsorted(edges, grid, side="right") - 1, 0, counts.size - 1)]
    dataio.write_table(out / "density.csv", {
        "d": grid, "null": p0 * f0, "nonnull_pos": p1 * f1, "nonnull_neg": p2 * f2,
        "mixture": p0 * f0 + p1 * f1 + p2 * f2, "histogram": hist})


def _study_report(src: Path, out: Path) -> None:
    cols = dataio.read_table(src / "study.csv")
    rows = list(zip(cols["scenario"], cols["method"], cols["threshold"], cols["metric"],
                    cols["value"]))
    curves: dict = {}
    power = []
    for sc, method, thr, metric, value in rows:
        if metric in ("accuracy", "fdr"):
            curves.setdefault((sc, method, float(thr)), {})[metric] = float(value)
        elif metric == "power":
            power.append((sc, method, float(value)))
    keys = sorted(curves)
    dataio.write_table(out / "curves.csv", {
        "scenario": [k[0] for k in keys], "method": [k[1] for k in keys],
        "threshold": [k[2] for k in keys],
        "accuracy": [curves[k].get("accuracy", float("nan")) for k in keys],
        "fdr": [curves[k].get("fdr", float("nan")) for k in keys]})
    dataio.write_table(out / "power.csv", {
        "scenario": [r[0] for r in power], "method": [r[1] for r in power],
        "power": [r[2] for r in power]})


def cmd_report(s: dict) -> int:
    src = Path(s["source"])
    out = Path(s["out"] or src)
    out.mkdir(parents=True, exist_ok=True)
    done = False
    try:
        if (src / "fit.json").exists():
            _density_report(src, out, s["grid_points"])
            done = True
        if (src / "study.csv").exists():
            _study_report(src, out)
            done = True
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise DataValidationError(f"cannot read {src}: {exc}") from None
    if not done:
        raise DataValidationError(f"{src} holds neither fit.json nor study.csv")
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "simulate": cmd_simulate, "classify": cmd_classify,
            "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(ns.verbose, 2),
                        format="%(levelname)s: %(message)s")
    logging.captureWarnings(True)
    try:
        settings = resolve_settings(ns.command, ns)
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return COMMANDS[ns.command](settings)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataValidationError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalFailure, PriorFitError, em.NonIdentifiableError, np.linalg.LinAlgError,
            FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
