import math

import numpy as np
import pytest
from scipy import stats

from jmpic.data import validate
from jmpic.simulate import (DEFAULTS, TRUTH, SimScenario, _censor_grid, _censor_interval, _mean_traj, fit_config,
                            generate, true_h0)


@pytest.fixture(scope="module")
def big1():
    return generate(SimScenario("study1", n=10_000, seed=5))


@pytest.fixture(scope="module")
def big2a():
    return generate(SimScenario("study2a", n=10_000, seed=5))


def test_null_effects_give_weibull_event_times():
    _, tb = generate(SimScenario("study1", n=10_000, seed=9, truth={"beta": [0.0], "gamma": [0.0]}))
    y = tb.event_times
    res = stats.kstest(y, lambda t: 1.0 - np.exp(-t ** 3))
    assert res.pvalue > 0.01


def test_event_times_have_unit_exponential_cumulative_hazard():
    from jmpic.simulate import _Latent, true_cumhaz, truth_parameters

    scn = SimScenario("study2a", n=2000, seed=3).resolved()
    ds, tb = generate(scn)
    x = np.array([s.x for s in ds.subjects])
    w = np.array([s.long_fixed for s in ds.subjects])
    lat = _Latent(x, w, tb.kappa, np.zeros(len(x)), np.zeros((len(x), 3)))
    H = true_cumhaz("study2a", truth_parameters(scn), lat, tb.event_times)
    assert stats.kstest(H, "expon").pvalue > 0.01


def test_truth_values():
    assert TRUTH["study1"]["beta"] == [-0.5] and TRUTH["study1"]["gamma"] == [0.5]
    assert TRUTH["study1"]["alpha"] == [0.5, -0.5, 1.0, -0.5] and TRUTH["study1"]["kappa_sd"] == [0.5, 0.8]
    assert TRUTH["study2a"]["beta"] == [-0.5, 0.5] and TRUTH["study2a"]["gamma"] == [0.25]
    assert TRUTH["study2a"]["kappa_sd"] == [0.2, 0.3]
    assert TRUTH["study2b"]["beta"] == [-1.0] and TRUTH["study2b"]["gamma"] == [-0.3]
    assert TRUTH["study2b"]["alpha"] == [-0.1, -0.1, -0.3] and TRUTH["study2b"]["kappa_sd"] == [0.2, 0.4]
    assert TRUTH["study2c"]["beta"] == [0.2, -0.5] and TRUTH["study2c"]["gamma"] == [1.0]
    assert TRUTH["study2c"]["kappa_sd"] == [0.1, 0.05]
    assert DEFAULTS["study1"]["sigma_eps"] == 0.05 and DEFAULTS["study2a"]["sigma_eps"] == 0.1


def test_study2a_mean_trajectory_matches_written_model():
    # written as a0 + a1 x3 + a2 t + a3 x3 t + a4 t^2 + a5 t^3 with (.5, .5, .5, .5, -.8, .2)
    t, w = 0.7, -1.3
    want = 0.5 + 0.5 * w + 0.5 * t + 0.5 * w * t - 0.8 * t ** 2 + 0.2 * t ** 3
    assert _mean_traj("study2a", t, np.array(TRUTH["study2a"]["alpha"]), w) == pytest.approx(want, rel=1e-14)


def test_study2c_trajectory_at_origin():
    assert _mean_traj("study2c", 0.0, None, 0.0) == pytest.approx(0.625)


def test_true_baseline_hazards():
    assert true_h0("study1", 2.0) == pytest.approx(12.0)
    assert true_h0("study2a", 1.0) == pytest.approx(2.0)
    assert true_h0("study2b", 0.0) == pytest.approx(0.5)
    # log-normal hazard f / S with mu 0.3, sd 0.5
    t = 1.4
    want = stats.lognorm.pdf(t, 0.5, scale=math.exp(0.3)) / stats.lognorm.sf(t, 0.5, scale=math.exp(0.3))
    assert true_h0("study2c", t) == pytest.approx(want, rel=1e-10)
    assert true_h0("study2c", 0.0) == 0.0
    with pytest.raises(ValueError):
        true_h0("study9", 1.0)


def test_study1_event_share(big1):
    ds, _ = big1
    assert abs(ds.status_counts()["exact"] / ds.n - 0.7) < 0.03
    assert ds.status_counts()["exact"] + ds.status_counts()["right"] == ds.n


def test_study2a_censoring_mix(big2a):
    ds, _ = big2a
    c = ds.status_counts()
    assert abs(c["right"] / ds.n - 0.3) < 0.03
    assert abs(c["left"] / ds.n - 0.1) < 0.03
    assert abs(c["interval"] / ds.n - 0.6) < 0.03


def test_interval_censoring_rule():
    y = np.array([0.5, 0.1, 2.0, 0.8])
    u = np.array([[0.01, 0.5, 0.0], [0.9, 0.5, 0.0], [0.9, 0.5, 0.0], [0.9, 0.5, 0.5]])
    # scales 1 and 2: L = 0.5, R = 2 (0.5 + 0.5 * u2)
    tl, tr = _censor_interval(y, u, 0.05, 1.0, 2.0)
    assert (tl[0], tr[0]) == (0.5, 0.5)  # exact
    assert (tl[1], tr[1]) == (0.0, 0.5)  # before L: left censored
    assert (tl[2], tr[2]) == (1.0, math.inf)  # after R = 1.0: right censored
    assert (tl[3], tr[3]) == (0.5, 1.5)  # inside (L, R)


def test_grid_censoring_rule():
    y = np.array([0.1, 0.6, 5.0])
    tl, tr, last = _censor_grid(y, np.array([0.5, 0.5, 0.5]), 0.5, 3.0, 0.25)
    assert (tl[0], tr[0]) == (0.0, 0.25)
    assert (tl[1], tr[1]) == (0.5, 0.75)
    assert tl[2] == 1.75 and math.isinf(tr[2]) and last[2] == 1.75


@pytest.mark.parametrize("design", ["study1", "study2a", "study2b", "study2c"])
def test_generated_data_validate_and_fit_config_builds(design):
    from jmpic.model import build_spec

    ds, tb = generate(SimScenario(design, n=80, seed=2))
    assert validate(ds) == []
    assert ds.q == 1
    spec = build_spec(ds, **fit_config(design))
    assert spec.p == ds.p


def test_generation_is_deterministic_and_per_subject():
    a, _ = generate(SimScenario("study2a", n=20, seed=77))
    b, _ = generate(SimScenario("study2a", n=20, seed=77))
    c, _ = generate(SimScenario("study2a", n=10, seed=77))
    assert a == b
    assert a.subjects[:10] == c.subjects
    d, _ = generate(SimScenario("study2a", n=20, seed=78))
    assert d != a


def test_longitudinal_times_precede_the_observed_interval():
    ds, _ = generate(SimScenario("study2a", n=300, seed=4))
    for s in ds.subjects:
        limit = s.t_right if s.t_left == 0.0 else s.t_left
        assert all(r.time <= limit for r in s.longitudinal)
        assert s.longitudinal[0].time == 0.0


def test_scenario_validation():
    with pytest.raises(ValueError):
        SimScenario("study7")
    with pytest.raises(ValueError):
        SimScenario("study1", pi_event=1.5)
    with pytest.raises(ValueError):
        SimScenario("study2a", tau_left=2.0, tau_right=1.0)
    scn = SimScenario("study2a", n=30, seed=3)
    assert SimScenario.from_dict(scn.to_dict()) == scn
