"""Finite-difference check of every score and Hessian block on random toy problems."""
import argparse
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "tests"))
from conftest import random_state, random_var, toy_dataset  # noqa: E402

from jmpic.deriv import gradient_check  # noqa: E402
from jmpic.model import build_spec, workspace  # noqa: E402


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--problems", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    worst = {}
    for k in range(args.problems):
        rng = np.random.default_rng([args.seed, k])
        ds = toy_dataset(rng, n=int(rng.integers(4, 11)))
        ws = workspace(build_spec(ds, baseline_m=5), ds)
        for kind, block, err in gradient_check(ws, random_state(ws, rng), random_var(ws, rng)):
            worst[kind, block] = max(worst.get((kind, block), 0.0), err)
    for (kind, block), err in sorted(worst.items()):
        limit = 1e-5 if kind == "score" else 1e-4
        print(f"{kind:<8} {block:<7} {err:10.3e}  {'pass' if err < limit else 'FAIL'}")


if __name__ == "__main__":
    main()
