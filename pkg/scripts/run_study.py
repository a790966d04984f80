"""Replicate a simulation scenario and print the bias/SE/coverage table.

    python3 scripts/run_study.py configs/study2a.json --reps 100 --methods mpl,midpoint --out runs/study2a
"""
import argparse
import json
import time

from jmpic.bench import CSV_COLUMNS, band_coverage, emit, run_bench
from jmpic.simulate import SimScenario


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("scenario")
    ap.add_argument("--reps", type=int, default=100)
    ap.add_argument("--methods", default="mpl")
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--n", type=int, default=None)
    ap.add_argument("--mean-ni", type=float, default=None)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    doc = json.load(open(args.scenario))
    for key, val in (("seed", args.seed), ("n", args.n), ("mean_ni", args.mean_ni)):
        if val is not None:
            doc[key] = val
    scn = SimScenario.from_dict(doc)
    t0 = time.time()

    def tick(done, total):
        if done % 10 == 0:
            print(f"  {done}/{total} replications, {time.time() - t0:.0f} s", flush=True)

    report = run_bench(scn, args.reps, methods=args.methods.split(","), workers=args.workers, progress=tick)
    print(f"{scn.design}, n={scn.n}, reps={args.reps}, {time.time() - t0:.0f} s")
    print("  ".join(f"{c:>12}" for c in CSV_COLUMNS))
    for m in report.methods:
        for name, row in report.rows[m].items():
            cells = [m, name] + [row[c] for c in CSV_COLUMNS[2:]]
            print("  ".join(f"{c:>12}" if isinstance(c, str) else f"{'':>12}" if c is None else f"{c:12.4f}"
                            for c in cells))
    for m in report.methods:
        mise = report.mise[m]
        print(f"{m}: MISE(h0) {mise if mise is None else round(mise, 4)}, band coverage "
              f"{band_coverage(report, m):.2f}, failures {report.failures[m]}"
              + ("  UNRELIABLE" if report.unreliable[m] else ""))
    if args.out:
        for p in emit(report, args.out):
            print("wrote", p)


if __name__ == "__main__":
    main()
