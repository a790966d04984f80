"""Replication harness: bias, Monte-Carlo and asymptotic standard errors,
coverage, and integrated squared error of the baseline hazard.

Each replication draws its own dataset from a seed derived from the scenario
seed and the replication index, fits every requested method and keeps the
estimates.  Replications may run in worker processes; results are reduced in
replication order, so reports do not depend on the number of workers.
"""
from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.integrate import trapezoid
from threadpoolctl import threadpool_limits

from . import __version__
from .data import midpoint_impute
from .inference import Z95, baseline_hazard, fit_model
from .simulate import (PILOT_SEED, SimScenario, _draw_latent_block, event_times, fit_config, generate,
                       observed_endpoints, true_h0, truth_parameters)

METHODS = ("mpl", "midpoint")
GRID_POINTS = 200
FAILURE_LIMIT = 0.2
CSV_COLUMNS = ("method", "parameter", "truth", "bias", "mc_se", "mean_asym_se", "cp_asym", "cp_mc", "n_ok")


@dataclass
class BenchReport:
    scenario: dict
    reps: int
    seeds: list
    methods: list
    rows: dict
    mise: dict
    failures: dict
    unreliable: dict
    band: dict
    replications: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"schema": "jmpic.bench/1", "version": __version__, "scenario": self.scenario, "reps": self.reps,
                "seeds": self.seeds, "methods": self.methods, "rows": self.rows, "mise": self.mise,
                "failures": self.failures, "unreliable": self.unreliable, "band": self.band,
                "replications": self.replications}

    @classmethod
    def from_dict(cls, d):
        return cls(d["scenario"], d["reps"], d["seeds"], d["methods"], d["rows"], d["mise"], d["failures"],
                   d["unreliable"], d["band"], d.get("replications", {}))


def replication_seed(seed: int, index: int) -> int:
    ss = np.random.SeedSequence([int(seed) & (2 ** 63 - 1), 104729, int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def h0_grid(scn: SimScenario, points: int = GRID_POINTS) -> np.ndarray:
    """Common scoring grid for the baseline hazard.

    Runs from 0 to the 95th percentile of the true event times, capped at the
    95th percentile of the finite observed endpoints: beyond the last
    observed endpoint the data carry no information on the hazard.  Both
    come from a fixed pilot sample, so the grid is the same in every
    replication.
    """
    scn = scn.resolved()
    truth = truth_parameters(scn)
    lat = _draw_latent_block(scn.design, truth, np.random.default_rng(PILOT_SEED), 20_000)
    y = event_times(scn.design, truth, lat, tol=1e-6, pieces=2)
    upper = float(np.quantile(y[np.isfinite(y)], 0.95))
    ends = observed_endpoints(scn, y, lat)
    return np.linspace(0.0, min(upper, float(np.quantile(ends, 0.95))), points)


def _truth_vector(scn, bundle):
    """Named true values of the reported parameters."""
    out = {}
    for j, b in enumerate(bundle.beta):
        out[f"beta{j + 1}"] = float(b)
    out["gamma"] = float(bundle.gamma[0])
    if bundle.alpha is not None:
        for k, a in enumerate(bundle.alpha):
            out[f"alpha{k}"] = float(a)
    out["sigma_eps"] = float(bundle.sigma_eps)
    for j, s in enumerate(bundle.kappa_sd):
        out[f"sigma_kappa{j + 1}"] = float(s)
    return out


def _estimates(fit, truth_names):
    lay = fit.layout
    z = fit.state.zeta()
    se = fit.se()
    est, ses = {}, {}
    for name in truth_names:
        if name.startswith("beta"):
            i = lay.beta.start + int(name[4:]) - 1
        elif name == "gamma":
            i = lay.gamma.start
        elif name.startswith("alpha"):
            i = lay.alpha.start + int(name[5:])
        elif name == "sigma_eps":
            est[name], ses[name] = math.sqrt(fit.var.sigma_eps2), float("nan")
            continue
        else:
            j = int(name[len("sigma_kappa"):]) - 1
            est[name], ses[name] = math.sqrt(fit.var.sigma_kappa2[j]), float("nan")
            continue
        est[name], ses[name] = float(z[i]), float(se[i])
    return est, ses


def _replicate(args):
    scn, index, methods, grid, configs = args
    with threadpool_limits(limits=1):
        rep_scn = replace(scn, seed=replication_seed(scn.seed, index))
        ds, bundle = generate(rep_scn)
        truth = _truth_vector(rep_scn, bundle)
        out = {"index": index, "seed": rep_scn.seed, "methods": {}}
        for method in methods:
            data = ds if method == "mpl" else midpoint_impute(ds)
            try:
                fit = fit_model(data, **configs.get(method, fit_config(scn.design)))
                ok = fit.converged and bool(np.all(np.isfinite(fit.covariance)))
                est, se = _estimates(fit, truth)
                h, lo, hi = baseline_hazard(fit, grid)
                out["methods"][method] = {"ok": ok, "estimate": est, "se": se, "h0": h.tolist(),
                                          "h0_lower": lo.tolist(), "h0_upper": hi.tolist(),
                                          "flags": list(fit.flags)}
            except (ValueError, np.linalg.LinAlgError, FloatingPointError) as e:
                out["methods"][method] = {"ok": False, "error": f"{type(e).__name__}: {e}"}
        out["truth"] = truth
    return out


def _finite_or_none(v):
    return float(v) if v is not None and np.isfinite(v) else None


def summarise(values, ses, truth):
    """Row of metrics for one parameter across successful replications."""
    est = np.asarray(values, dtype=float)
    se = np.asarray(ses, dtype=float)
    n = est.size
    bias = float(np.mean(est) - truth) if n else float("nan")
    mc_se = float(np.std(est, ddof=1)) if n >= 2 else float("nan")
    has_se = n and np.all(np.isfinite(se))
    mean_se = float(np.mean(se)) if has_se else float("nan")
    cp_asym = float(np.mean(np.abs(est - truth) <= Z95 * se)) if has_se else float("nan")
    cp_mc = float(np.mean(np.abs(est - truth) <= Z95 * mc_se)) if n >= 2 else float("nan")
    return {"truth": truth, "bias": _finite_or_none(bias), "mc_se": _finite_or_none(mc_se),
            "mean_asym_se": _finite_or_none(mean_se), "cp_asym": _finite_or_none(cp_asym),
            "cp_mc": _finite_or_none(cp_mc), "n_ok": int(n)}


def mise_h0(fits, truth, grid) -> float:
    """Mean over replications of the trapezoid integral of ``(h0_hat - h0)^2``.

    ``fits`` holds fitted results or arrays of estimated hazards on ``grid``;
    ``truth`` is a design name or a callable.
    """
    grid = np.asarray(grid, dtype=float)
    h_true = true_h0(truth, grid) if isinstance(truth, str) else np.asarray(truth(grid), dtype=float)
    vals = []
    for f in fits:
        h = baseline_hazard(f, grid)[0] if hasattr(f, "state") else np.asarray(f, dtype=float)
        vals.append(float(trapezoid((h - h_true) ** 2, grid)))
    return float(np.mean(vals)) if vals else float("nan")


def run_bench(scn: SimScenario, reps: int, fit_configs: dict | None = None, methods=("mpl",), workers: int = 1,
              progress=None) -> BenchReport:
    """Replicate a scenario ``reps`` times and aggregate the metrics."""
    if reps < 2:
        raise ValueError("reps must be at least 2")
    methods = [m for m in METHODS if m in methods]
    if not methods:
        raise ValueError(f"methods must be a subset of {METHODS}")
    scn = scn.resolved()
    grid = h0_grid(scn)
    configs = dict(fit_configs or {})
    jobs = [(scn, r, methods, grid, configs) for r in range(reps)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_replicate, jobs, chunksize=1))
    else:
        results = []
        for job in jobs:
            results.append(_replicate(job))
            if progress is not None:
                progress(len(results), reps)
    results.sort(key=lambda r: r["index"])
    truth = results[0]["truth"]
    h_true = true_h0(scn.design, grid)
    rows, mise, failures, unreliable, band, raw = {}, {}, {}, {}, {}, {}
    for m in methods:
        good = [r["methods"][m] for r in results if r["methods"][m]["ok"]]
        failures[m] = reps - len(good)
        unreliable[m] = failures[m] > FAILURE_LIMIT * reps
        rows[m] = {name: summarise([g["estimate"][name] for g in good], [g["se"][name] for g in good], t)
                   for name, t in truth.items()}
        H = np.array([g["h0"] for g in good]).reshape(len(good), grid.size)
        mise[m] = _finite_or_none(mise_h0(list(H), scn.design, grid)) if good else None
        if good:
            lo = np.array([g["h0_lower"] for g in good])
            hi = np.array([g["h0_upper"] for g in good])
            band[m] = {"grid": grid.tolist(), "true": h_true.tolist(), "mean": H.mean(axis=0).tolist(),
                       "lower": lo.mean(axis=0).tolist(), "upper": hi.mean(axis=0).tolist(),
                       "q025": np.quantile(H, 0.025, axis=0).tolist(), "q975": np.quantile(H, 0.975, axis=0).tolist()}
        raw[m] = [{"index": r["index"], "ok": r["methods"][m]["ok"],
                   "estimate": r["methods"][m].get("estimate"), "se": _nan_to_none(r["methods"][m].get("se")),
                   "error": r["methods"][m].get("error")} for r in results]
    return BenchReport(scn.to_dict(), reps, [r["seed"] for r in results], methods, rows, mise, failures,
                       unreliable, band, raw)


def _nan_to_none(d):
    if d is None:
        return None
    return {k: _finite_or_none(v) for k, v in d.items()}


def band_coverage(report: BenchReport, method: str = "mpl") -> float:
    """Share of the grid where the true hazard lies inside the mean 95% band."""
    b = report.band[method]
    t, lo, hi = (np.asarray(b[k]) for k in ("true", "lower", "upper"))
    return float(np.mean((lo <= t) & (t <= hi)))


def emit(report: BenchReport, out_dir, formats=("csv", "json", "band")) -> list:
    """Write ``report.csv``, ``report.json`` and ``h0_band.csv``; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    if "csv" in formats:
        p = os.path.join(out_dir, "report.csv")
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for m in report.methods:
                for name, row in report.rows[m].items():
                    w.writerow([m, name] + [_cell(row[k]) for k in CSV_COLUMNS[2:]])
        paths.append(p)
    if "json" in formats:
        p = os.path.join(out_dir, "report.json")
        with open(p, "w") as fh:
            json.dump(report.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")
        paths.append(p)
    if "band" in formats:
        p = os.path.join(out_dir, "h0_band.csv")
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "t", "true", "mean", "lower", "upper", "q025", "q975"])
            for m, b in report.band.items():
                for k, t in enumerate(b["grid"]):
                    w.writerow([m, _cell(t)] + [_cell(b[c][k]) for c in ("true", "mean", "lower", "upper", "q025", "q975")])
        paths.append(p)
    return paths


def _cell(v):
    if v is None:
        return ""
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)
