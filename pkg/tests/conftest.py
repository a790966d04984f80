import math
import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from jmpic.data import Dataset, LongRecord, Subject

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large])
settings.load_profile("default")

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def toy_dataset(rng, n=8, q=1, p=2, pz=1, max_visits=4, horizon=2.0):
    """Small dataset mixing all four censoring kinds, with longitudinal records."""
    kinds = ["exact", "left", "right", "interval"]
    subs = []
    for i in range(n):
        kind = kinds[i % 4] if i < 4 else kinds[rng.integers(4)]
        a = float(rng.uniform(0.3, 0.7 * horizon))
        b = a + float(rng.uniform(0.1, 0.3 * horizon))
        tl, tr = {"exact": (a, a), "left": (0.0, a), "right": (a, math.inf), "interval": (a, b)}[kind]
        last = tl if kind != "left" else tr
        k = int(rng.integers(1, max_visits + 1))
        times = np.sort(rng.uniform(0, last, size=k - 1)) if k > 1 else np.zeros(0)
        times = np.unique(np.concatenate([[0.0], times]))
        recs = tuple(LongRecord(float(t), tuple(float(v) for v in rng.normal(0.5 + 0.3 * t, 0.3, size=q)))
                     for t in times) if q else ()
        subs.append(Subject(str(i + 1), tl, tr, tuple(float(v) for v in rng.normal(size=p)), recs,
                            tuple(float(v) for v in rng.normal(size=pz))))
    return Dataset(tuple(subs), p=p, q=q, pz=pz)


def random_state(ws, rng, theta_scale=1.0):
    from jmpic.model import ParameterState

    lay = ws.lay
    return ParameterState(rng.normal(scale=0.3, size=lay.p), rng.normal(scale=0.3, size=lay.q),
                          rng.uniform(0.2, 1.0, size=lay.m) * theta_scale, rng.normal(scale=0.3, size=lay.B),
                          rng.normal(scale=0.2, size=(ws.n, lay.C)))


def random_var(ws, rng):
    from jmpic.model import VarianceComponents

    return VarianceComponents(float(rng.uniform(0.05, 0.2)), float(rng.uniform(0.5, 2.0)),
                              tuple(float(v) for v in rng.uniform(0.5, 2.0, size=ws.spec.q)),
                              tuple(float(v) for v in rng.uniform(0.1, 0.5, size=ws.lay.C)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
