import csv
import json
import math
import statistics

import numpy as np
import pytest
from scipy import integrate

import jmpic.bench as bench
from jmpic.bench import (CSV_COLUMNS, BenchReport, band_coverage, emit, h0_grid, mise_h0, replication_seed,
                         run_bench, summarise)
from jmpic.simulate import SimScenario, true_h0

SMALL = SimScenario("study2a", n=50, seed=11)


@pytest.fixture(scope="module")
def small_report():
    return run_bench(SMALL, reps=2, methods=("mpl", "midpoint"))


def test_smoke_report_structure(small_report):
    r = small_report
    assert r.methods == ["mpl", "midpoint"]
    assert r.reps == 2 and len(r.seeds) == 2
    for m in r.methods:
        assert {"beta1", "beta2", "gamma", "alpha0", "sigma_eps", "sigma_kappa1"} <= set(r.rows[m])
        assert r.mise[m] is None or r.mise[m] >= 0
    assert r.seeds == [replication_seed(11, 0), replication_seed(11, 1)]


def test_summarise_examples():
    row = summarise([1.0, 3.0], [1.0, 1.0], 2.0)
    assert row["bias"] == 0.0
    assert row["mc_se"] == pytest.approx(math.sqrt(2.0))
    assert row["cp_asym"] == 1.0 and row["n_ok"] == 2
    # inflated standard errors cover everything
    rng = np.random.default_rng(0)
    est = rng.normal(0.3, 1.0, 50)
    assert summarise(est, np.full(50, 100.0), 0.3)["cp_asym"] == 1.0
    assert summarise(est, np.full(50, 1e-9), 0.3)["cp_asym"] == 0.0


def test_mc_se_matches_two_pass_standard_deviation():
    rng = np.random.default_rng(1)
    est = 1e3 + rng.normal(size=37)
    row = summarise(est, np.ones(37), 1e3)
    assert abs(row["mc_se"] - statistics.stdev(est.tolist())) <= 1e-12 * row["mc_se"]


def test_missing_standard_errors_give_empty_cells():
    row = summarise([0.1, 0.2, 0.3], [float("nan")] * 3, 0.2)
    assert row["mean_asym_se"] is None and row["cp_asym"] is None and row["mc_se"] is not None


def test_mise_trivial_and_quadrature():
    grid = np.linspace(0.0, 1.5, 200)
    truth = true_h0("study2a", grid)
    assert mise_h0([truth, truth], "study2a", grid) == 0.0
    assert mise_h0([truth + 0.5], "study2a", grid) == pytest.approx(0.25 * 1.5, rel=1e-12)
    # a smooth error curve: trapezoid against adaptive quadrature
    est = truth + np.sin(grid)
    want = integrate.quad(lambda t: math.sin(t) ** 2, 0.0, 1.5)[0]
    assert mise_h0([est], "study2a", grid) == pytest.approx(want, rel=1e-4)


def test_grid_is_fixed_and_positive():
    g1, g2 = h0_grid(SMALL), h0_grid(SimScenario("study2a", n=500, seed=99))
    np.testing.assert_array_equal(g1, g2)
    assert g1[0] == 0.0 and np.all(np.diff(g1) > 0)


def test_emit_files(tmp_path, small_report):
    paths = emit(small_report, tmp_path)
    assert [p.split("/")[-1] for p in paths] == ["report.csv", "report.json", "h0_band.csv"]
    with open(paths[0]) as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == CSV_COLUMNS
    back = BenchReport.from_dict(json.load(open(paths[1])))
    assert back.to_dict() == json.loads(json.dumps(small_report.to_dict()))
    with open(paths[2]) as fh:
        band = list(csv.DictReader(fh))
    for m in small_report.methods:
        t = [float(r["t"]) for r in band if r["method"] == m]
        assert np.all(np.diff(t) > 0)
    assert 0.0 <= band_coverage(small_report) <= 1.0


def test_workers_do_not_change_the_report(small_report, tmp_path):
    two = run_bench(SMALL, reps=2, methods=("mpl", "midpoint"), workers=2)
    a = emit(small_report, tmp_path / "a")
    b = emit(two, tmp_path / "b")
    for pa, pb in zip(a, b):
        assert open(pa, "rb").read() == open(pb, "rb").read()


def test_reps_and_methods_are_checked():
    with pytest.raises(ValueError):
        run_bench(SMALL, reps=1)
    with pytest.raises(ValueError):
        run_bench(SMALL, reps=2, methods=("bootstrap",))


def test_failing_fits_mark_report_unreliable(monkeypatch):
    def broken(*a, **k):
        raise ValueError("no fit")

    monkeypatch.setattr(bench, "fit_model", broken)
    r = run_bench(SimScenario("study1", n=30, seed=2), reps=2)
    assert r.failures["mpl"] == 2 and r.unreliable["mpl"]
    assert all(x["error"] == "ValueError: no fit" for x in r.replications["mpl"])
