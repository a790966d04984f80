"""Command-line interface: ``jmpic {fit,predict,simulate,benchmark,gradcheck}``.

Exit codes: 0 success (fit converged, gradient check passed), 1 input error,
2 completed without convergence (or a failed gradient check, or an
unreliable benchmark).

Main outputs are deterministic given the inputs and seed.  Wall-clock time
and run metadata go to a ``*.meta.json`` file next to each artifact.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import replace

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .data import DataError, parse_long_csv, validate, write_long_csv
from .optimizer import InnerLoopConfig
from .variance import OuterLoopConfig

MODELSPEC_SCHEMA = "jmpic.modelspec/1"
SCENARIO_SCHEMA = "jmpic.scenario/1"
QUERY_SCHEMA = "jmpic.query/1"
GRADCHECK_TOL = 1e-5

EXIT_OK, EXIT_INPUT, EXIT_NOT_CONVERGED = 0, 1, 2


class InputError(Exception):
    pass


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as e:
        raise InputError(f"cannot read {path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise InputError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from None


def _read_data(path):
    try:
        ds = parse_long_csv(path)
    except OSError as e:
        raise InputError(f"cannot read {path}: {e.strerror}") from None
    except DataError as e:
        raise InputError(str(e)) from None
    if ds.n == 0:
        raise InputError(f"{path}: no subjects")
    return ds


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _write_meta(path, config, seed, started):
    meta = {"tool": "jmpic", "version": __version__, "config_digest": _digest(config), "seed": seed,
            "wall_clock_seconds": round(time.time() - started, 3),
            "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S%z")}
    with open(path, "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")


def spec_kwargs(model: dict) -> dict:
    """Translate a model-spec document into :func:`jmpic.model.build_spec` arguments."""
    schema = model.get("schema", MODELSPEC_SCHEMA)
    if schema != MODELSPEC_SCHEMA:
        raise InputError(f"unsupported model-spec schema {schema!r}")
    out = {}
    base = model.get("baseline", {})
    if base:
        out["baseline_family"] = base.get("family", "mspline")
        out["baseline_order"] = int(base.get("order", 4))
        if "knots" in base:
            out["baseline_knots"] = [float(k) for k in base["knots"]]
        if "m" in base:
            out["baseline_m"] = int(base["m"])
    if "longitudinal" in model:
        out["longitudinal"] = model["longitudinal"]
    if "survival" in model:
        out["survival"] = bool(model["survival"])
    return out


def _check_covariates(model, ds):
    for key, have in (("x", ds.x_names), ("w", ds.w_names), ("z", ds.z_names)):
        want = model.get("covariates", {}).get(key)
        if want is not None and list(want) != list(have):
            raise InputError(f"model expects {key} columns {want}, data has {list(have)}")


def _configs(model):
    try:
        inner = InnerLoopConfig(**model.get("inner", {}))
        outer = OuterLoopConfig(**model.get("outer", {}))
    except (TypeError, ValueError) as e:
        raise InputError(f"bad optimiser settings: {e}") from None
    return inner, outer


# commands ---------------------------------------------------------------------------

def cmd_fit(args) -> int:
    from .inference import _jsonable, fit_model, wald

    started = time.time()
    ds = _read_data(args.data)
    findings = validate(ds)
    if findings:
        raise InputError("data failed validation:\n  " + "\n  ".join(findings))
    model = _read_json(args.model) if args.model else {}
    _check_covariates(model, ds)
    inner, outer = _configs(model)
    try:
        fit = fit_model(ds, cfg_inner=inner, cfg_outer=outer, **spec_kwargs(model))
    except ValueError as e:
        raise InputError(str(e)) from None
    os.makedirs(args.out, exist_ok=True)
    config = {"model": model, "data": ds.digest()}
    doc = fit.to_dict()
    doc["run"] = {"tool": "jmpic", "version": __version__, "config_digest": _digest(config), "seed": args.seed}
    with open(os.path.join(args.out, "fit.json"), "w") as fh:
        fh.write(json.dumps(doc, indent=1, sort_keys=True, default=_jsonable))
        fh.write("\n")
    with open(os.path.join(args.out, "summary.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["parameter", "estimate", "se", "z", "p", "lower95", "upper95"])
        for k, name in enumerate(fit.names):
            r = wald(fit, k)
            w.writerow([name] + [repr(float(v)) for v in (r.estimate, r.se, r.z, r.p, r.ci95[0], r.ci95[1])])
    _write_meta(os.path.join(args.out, "fit.meta.json"), config, args.seed, started)
    _print_summary(fit)
    return EXIT_OK if fit.converged else EXIT_NOT_CONVERGED


def _print_summary(fit):
    from .inference import wald

    lay = fit.layout
    print(f"converged: {fit.converged}   outer iterations: {len(fit.history)}")
    for k in list(range(lay.beta.start, lay.gamma.stop)) + list(range(lay.alpha.start, lay.alpha.stop)):
        r = wald(fit, k)
        print(f"  {fit.names[k]:<22} {r.estimate: .4f}  se {r.se:.4f}  p {r.p:.3g}")
    v = fit.var
    print(f"  sigma_eps {np.sqrt(v.sigma_eps2):.4f}  sigma_kappa {np.sqrt(v.sigma_kappa2).round(4).tolist()}")
    for f in fit.flags:
        print(f"  note: {f}")


def _subject_index(fit, ref):
    ids = fit.subjects["id"]
    if isinstance(ref, str):
        if ref not in ids:
            raise InputError(f"unknown subject id {ref!r}")
        return ids.index(ref)
    return int(ref)


def cmd_predict(args) -> int:
    from .inference import FitResult, conditional_survival, predict_individual, predict_survival

    started = time.time()
    doc = _read_json(args.fit)
    try:
        fit = FitResult.from_dict(doc)
    except (KeyError, ValueError) as e:
        raise InputError(f"{args.fit}: not a fit document ({e})") from None
    query = _read_json(args.query)
    if query.get("schema", QUERY_SCHEMA) != QUERY_SCHEMA:
        raise InputError(f"unsupported query schema {query.get('schema')!r}")
    grid = np.asarray(query.get("grid", []), dtype=float)
    os.makedirs(args.out, exist_ok=True)
    q = fit.spec.q
    curves, conds = [], []
    try:
        for k, item in enumerate(query.get("queries", [])):
            kind = item.get("kind", "population")
            label = str(item.get("label", k))
            if kind == "population":
                c = predict_survival(fit, item.get("x", []), None, grid, item.get("w"))
                for j, t in enumerate(grid):
                    curves.append([label, kind, t, c.survival[j], c.lower[j], c.upper[j]] + [""] * q)
            elif kind == "individual":
                i = _subject_index(fit, item["subject"])
                traj, S = predict_individual(fit, i, grid)
                for j, t in enumerate(grid):
                    curves.append([label, kind, t, S[j], "", ""] + list(traj[j]))
            elif kind == "conditional":
                who = _subject_index(fit, item["subject"]) if "subject" in item else {"x": item.get("x", []),
                                                                                     "w": item.get("w")}
                conds.append([label, item["t"], item["u"], conditional_survival(fit, who, float(item["t"]), float(item["u"]))])
            else:
                raise InputError(f"unknown query kind {kind!r}")
    except (KeyError, IndexError, ValueError) as e:
        raise InputError(f"bad query: {e}") from None
    with open(os.path.join(args.out, "curves.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "kind", "t", "survival", "lower95", "upper95"] + [f"z{r + 1}" for r in range(q)])
        for row in curves:
            w.writerow([_cell(v) for v in row])
    if conds:
        with open(os.path.join(args.out, "conditional.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["label", "t", "u", "probability"])
            for row in conds:
                w.writerow([_cell(v) for v in row])
    _write_meta(os.path.join(args.out, "curves.meta.json"), query, args.seed, started)
    return EXIT_OK


def _cell(v):
    if isinstance(v, str):
        return v
    return repr(float(v))


def _scenario(path, seed):
    from .simulate import SimScenario

    doc = _read_json(path)
    if doc.get("schema", SCENARIO_SCHEMA) != SCENARIO_SCHEMA:
        raise InputError(f"unsupported scenario schema {doc.get('schema')!r}")
    try:
        scn = SimScenario.from_dict(doc)
    except (TypeError, ValueError) as e:
        raise InputError(f"bad scenario: {e}") from None
    return replace(scn, seed=seed) if seed is not None else scn


def cmd_simulate(args) -> int:
    from .simulate import generate

    started = time.time()
    scn = _scenario(args.scenario, args.seed).resolved()
    ds, truth = generate(scn)
    os.makedirs(args.out, exist_ok=True)
    write_long_csv(ds, os.path.join(args.out, "data.csv"))
    doc = {"schema": "jmpic.truth/1", "seed": scn.seed, "scenario": scn.to_dict(), "beta": truth.beta.tolist(),
           "gamma": truth.gamma.tolist(), "alpha": None if truth.alpha is None else truth.alpha.tolist(),
           "sigma_eps": truth.sigma_eps, "kappa_sd": truth.kappa_sd.tolist(), "kappa": truth.kappa.tolist(),
           "event_times": [t if np.isfinite(t) else None for t in truth.event_times.tolist()],
           "status_counts": ds.status_counts()}
    with open(os.path.join(args.out, "truth.json"), "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    _write_meta(os.path.join(args.out, "data.meta.json"), scn.to_dict(), scn.seed, started)
    print(f"wrote {ds.n} subjects, {ds.n_records} records, status {ds.status_counts()}")
    return EXIT_OK


def cmd_benchmark(args) -> int:
    from .bench import emit, run_bench

    started = time.time()
    scn = _scenario(args.scenario, args.seed)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    try:
        report = run_bench(scn, args.reps, methods=methods, workers=args.threads)
    except ValueError as e:
        raise InputError(str(e)) from None
    paths = emit(report, args.out)
    _write_meta(os.path.join(args.out, "report.meta.json"), {"scenario": scn.to_dict(), "reps": args.reps,
                                                              "methods": methods}, scn.seed, started)
    for p in paths:
        print(f"wrote {p}")
    return EXIT_NOT_CONVERGED if any(report.unreliable.values()) else EXIT_OK


def cmd_gradcheck(args) -> int:
    from .deriv import gradient_check
    from .model import VarianceComponents, build_spec, workspace
    from .optimizer import initial_state

    ds = _read_data(args.data)
    if args.max_subjects and ds.n > args.max_subjects:
        ds = replace(ds, subjects=ds.subjects[:args.max_subjects])
    model = _read_json(args.model) if args.model else {}
    try:
        spec = build_spec(ds, **spec_kwargs(model))
        ws = workspace(spec, ds)
    except ValueError as e:
        raise InputError(str(e)) from None
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    st = initial_state(ws)
    st = replace(st, beta=rng.normal(scale=0.3, size=st.beta.size), gamma=rng.normal(scale=0.3, size=st.gamma.size),
                 theta=rng.uniform(0.2, 1.0, size=st.theta.size) * max(float(np.mean(st.theta)), 1e-3) / 0.6,
                 alpha=st.alpha + rng.normal(scale=0.05, size=st.alpha.size),
                 kappa=rng.normal(scale=0.1, size=st.kappa.shape))
    var = VarianceComponents(float(rng.uniform(0.01, 0.1)), float(rng.uniform(0.2, 2.0)),
                             tuple(float(v) for v in rng.uniform(0.2, 2.0, size=spec.q)),
                             tuple(float(v) for v in rng.uniform(0.05, 0.5, size=ws.lay.C)))
    rows = gradient_check(ws, st, var)
    ok = True
    print(f"{'kind':<8} {'block':<7} {'rel_err':>10}  result")
    for kind, block, err in rows:
        passed = err < GRADCHECK_TOL
        ok &= passed
        print(f"{kind:<8} {block:<7} {err:10.3e}  {'pass' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_NOT_CONVERGED


# entry point ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jmpic", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"jmpic {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default):
        sp.add_argument("--seed", type=int, default=None, help="random seed (recorded in outputs)")
        sp.add_argument("--threads", type=int, default=1, help="worker processes for replications")
        sp.add_argument("--out", default=out_default, help="output directory")

    sp = sub.add_parser("fit", help="fit a joint model to long-format data")
    sp.add_argument("data")
    sp.add_argument("model", nargs="?", help="model-spec JSON (defaults apply when omitted)")
    common(sp, "fit_out")
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("predict", help="survival curves and conditional survival from a fit")
    sp.add_argument("fit")
    sp.add_argument("query")
    common(sp, "predict_out")
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("simulate", help="draw a dataset from a simulation scenario")
    sp.add_argument("scenario")
    common(sp, "sim_out")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("benchmark", help="replicate a scenario and report bias, SE and coverage")
    sp.add_argument("scenario")
    sp.add_argument("--reps", type=int, default=100)
    sp.add_argument("--methods", default="mpl", help="comma list from {mpl, midpoint}")
    common(sp, "bench_out")
    sp.set_defaults(func=cmd_benchmark)

    sp = sub.add_parser("gradcheck", help="compare analytic derivatives with finite differences")
    sp.add_argument("data")
    sp.add_argument("model", nargs="?")
    sp.add_argument("--max-subjects", type=int, default=20)
    common(sp, "gradcheck_out")
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with threadpool_limits(limits=1):
            return args.func(args)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
