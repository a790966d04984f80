import json
import math
from dataclasses import replace

import numpy as np
import pytest

from jmpic.data import Dataset, Subject
from jmpic.deriv import derivatives
from jmpic.inference import (Z95, FitResult, IdentifiabilityError, conditional_from_survival, conditional_survival,
                             fit_model, hazard_ratio, predict_individual, predict_survival, sandwich_covariance,
                             wald, wald_from)
from jmpic.model import VarianceComponents, build_spec, workspace
from jmpic.optimizer import InnerLoopConfig, initial_state, run_inner
from jmpic.simulate import SimScenario, fit_config, generate


@pytest.fixture(scope="module")
def fitted():
    ds, _ = generate(SimScenario("study2a", n=80, seed=21))
    fit = fit_model(ds, **fit_config("study2a"))
    assert fit.converged
    return ds, fit


def test_sandwich_matches_dense_inverse(fitted):
    ds, fit = fitted
    ws = workspace(fit.spec, ds)
    _, hess = derivatives(ws, fit.state, fit.var)
    Z = ws.lay.Z
    keep = np.setdiff1d(np.arange(hess.dense().shape[0]), ws.lay.theta.start + np.asarray(fit.active_set, dtype=int))
    F = hess.dense()[np.ix_(keep, keep)]
    common = keep[keep < Z]
    Sinv = np.linalg.inv(F)[:common.size, :common.size]
    P = (hess.Q_theta + sum(hess.Q_alpha, np.zeros((Z, Z))))[np.ix_(common, common)]
    want = np.zeros((Z, Z))
    want[np.ix_(common, common)] = Sinv - Sinv @ P @ Sinv
    got = sandwich_covariance(ws, fit.state, fit.var, fit.active_set)
    np.testing.assert_allclose(got, want, rtol=1e-7, atol=1e-10 * np.abs(want).max())
    for u in fit.active_set:
        assert not got[ws.lay.theta.start + u].any()


def _exponential_fit(rate=0.8, n=300, seed=0, beta=0.4):
    rng = np.random.default_rng(seed)
    x = rng.binomial(1, 0.5, n).astype(float)
    y = rng.exponential(1.0 / (rate * np.exp(beta * x)))
    c = rng.uniform(0.5, 3.0, n)
    subs = tuple(Subject(str(i), min(a, b), a if a <= b else math.inf, (xi,)) for i, (a, b, xi) in enumerate(zip(y, c, x)))
    ds = Dataset(subs, p=1, q=0)
    spec = build_spec(ds, baseline_family="indicator")
    ws = workspace(spec, ds)
    var = VarianceComponents(1.0, 1.0, (), ())
    st, tr = run_inner(ws, initial_state(ws), var, InnerLoopConfig(tol=1e-12, max_iter=5000))
    cov = sandwich_covariance(ws, st, var)
    fit = FitResult(spec, st, var, cov, (), tr.converged, ws.lay.names(spec, ds),
                    {"id": [s.id for s in subs], "x": [list(s.x) for s in subs], "w": [[] for _ in subs]},
                    0.0, [], [], [], ds.digest())
    return ds, ws, fit


def test_unpenalised_covariance_is_inverse_numeric_hessian():
    ds, ws, fit = _exponential_fit()
    z0 = fit.state.zeta()
    f = lambda z: ws.objective(fit.state.with_zeta(z, ws.lay), fit.var)
    k = z0.size
    Hn = np.zeros((k, k))
    h = 1e-4
    for i in range(k):
        for j in range(k):
            ei, ej = np.eye(k)[i] * h, np.eye(k)[j] * h
            Hn[i, j] = (f(z0 + ei + ej) - f(z0 + ei - ej) - f(z0 - ei + ej) + f(z0 - ei - ej)) / (4 * h * h)
    np.testing.assert_allclose(fit.covariance, np.linalg.inv(-Hn), rtol=1e-5)


def test_wald_examples():
    r = wald_from(1.96, 1.0)
    assert r.p == pytest.approx(0.05, abs=1e-3)
    assert r.ci95 == pytest.approx((1.96 - Z95, 1.96 + Z95))
    assert wald_from(0.3, 0.0).flag


def test_contrast_uses_delta_method(fitted):
    _, fit = fitted
    c = np.zeros(fit.state.zeta().size)
    c[0], c[1] = 1.0, -1.0
    r = wald(fit, c)
    assert r.estimate == pytest.approx(fit.state.beta[0] - fit.state.beta[1])
    assert r.se == pytest.approx(math.sqrt(c @ fit.covariance @ c), rel=1e-12)
    hr, lo, hi, p = hazard_ratio(fit, 0)
    assert lo < hr < hi and hr == pytest.approx(math.exp(fit.state.beta[0])) and 0 <= p <= 1


def test_band_matches_numeric_delta_method(fitted):
    _, fit = fitted
    grid = np.array([0.2, 0.5, 0.9])
    x, w = [0.3, 1.0], [0.5]
    curve = predict_survival(fit, x, grid=grid, w=w)
    z0 = fit.state.zeta()
    lay = fit.layout

    def logH(z):
        f = replace(fit, state=fit.state.with_zeta(z, lay))
        return np.log(predict_survival(f, x, grid=grid, w=w).cumhaz)

    G = np.zeros((grid.size, z0.size))
    for i in range(z0.size):
        e = np.zeros_like(z0)
        e[i] = 1e-6 * max(1.0, abs(z0[i]))
        G[:, i] = (logH(z0 + e) - logH(z0 - e)) / (2 * e[i])
    se = np.sqrt(np.einsum("gi,ij,gj->g", G, fit.covariance, G))
    H = curve.cumhaz
    np.testing.assert_allclose(curve.lower, np.exp(-H * np.exp(Z95 * se)), rtol=1e-6)
    np.testing.assert_allclose(curve.upper, np.exp(-H * np.exp(-Z95 * se)), rtol=1e-6)


def test_survival_at_origin_and_band_order(fitted):
    _, fit = fitted
    grid = np.linspace(0.0, fit.spec.baseline.upper, 25)
    c = predict_survival(fit, [0.0, 1.0], grid=grid, w=[0.0])
    assert c.survival[0] == 1.0 and c.lower[0] == 1.0 and c.upper[0] == 1.0
    assert np.all(np.diff(c.survival) <= 0)
    assert np.all(c.lower <= c.survival + 1e-15) and np.all(c.survival <= c.upper + 1e-15)


def test_zero_covariance_collapses_band(fitted):
    _, fit = fitted
    f = replace(fit, covariance=np.zeros_like(fit.covariance))
    c = predict_survival(f, [0.0, 0.0], grid=[0.3, 0.6], w=[0.0])
    np.testing.assert_array_equal(c.lower, c.survival)
    np.testing.assert_array_equal(c.upper, c.survival)


def test_conditional_survival_worked_example():
    assert round(conditional_from_survival(0.61, 0.73), 2) == 0.84
    with pytest.raises(ValueError):
        conditional_from_survival(0.1, 0.0)


def test_conditional_survival_constant_hazard_closed_form():
    _, _, fit = _exponential_fit()
    rate = fit.state.theta[0] * math.exp(fit.state.beta[0])
    got = conditional_survival(fit, {"x": [1.0]}, 0.4, 1.1)
    assert got == pytest.approx(math.exp(-rate * 0.7), rel=1e-12)
    assert conditional_survival(fit, {"x": [1.0]}, 0.7, 0.7) == 1.0


def test_predict_individual(fitted):
    ds, fit = fitted
    grid = np.array([0.0, 0.4, 0.8])
    traj, S = predict_individual(fit, 3, grid)
    s = ds.subjects[3]
    a, k = fit.state.alpha, fit.state.kappa[3]
    w = s.long_fixed[0]
    want = (a[0] + a[1] * grid + a[2] * grid ** 2 + a[3] * grid ** 3 + w * (a[4] + a[5] * grid)
            + k[0] + k[1] * grid)
    np.testing.assert_allclose(traj[:, 0], want, rtol=1e-12, atol=1e-12)
    assert S[0] == 1.0 and np.all(np.diff(S) <= 0)
    assert conditional_survival(fit, 3, 0.4, 0.8) == pytest.approx(S[2] / S[1], rel=1e-12)
    with pytest.raises(IndexError):
        predict_individual(fit, len(ds.subjects), grid)


def test_grid_outside_support_is_rejected(fitted):
    _, fit = fitted
    with pytest.raises(ValueError):
        predict_survival(fit, [0.0, 0.0], grid=[fit.spec.baseline.upper + 1.0], w=[0.0])


def test_fit_json_round_trip(fitted):
    _, fit = fitted
    text = fit.to_json()
    back = FitResult.from_json(text)
    assert back.to_json() == text
    np.testing.assert_array_equal(back.covariance, fit.covariance)
    assert json.loads(text)["schema"] == "jmpic.fit/1"


def test_duplicated_covariate_is_not_identifiable():
    ds, _, _ = _exponential_fit(n=60)
    subs = tuple(replace(s, x=(s.x[0], s.x[0])) for s in ds.subjects)
    ds2 = Dataset(subs, p=2, q=0)
    spec = build_spec(ds2, baseline_family="indicator")
    ws = workspace(spec, ds2)
    var = VarianceComponents(1.0, 1.0, (), ())
    st, _ = run_inner(ws, initial_state(ws), var, InnerLoopConfig(max_iter=200))
    with pytest.raises(IdentifiabilityError):
        sandwich_covariance(ws, st, var)
