"""Post-fit uncertainty and prediction.

The covariance of the common parameters (beta, gamma, theta, alpha) is the
sandwich ``A^{-1} M A^{-1}`` where ``A`` is the negative Hessian of the
penalised objective and ``M`` the negative Hessian of the unpenalised
log-likelihood (measurement model and random-effect density included), both
with theta entries at active constraints removed.  Because the two differ
only in the roughness-penalty blocks ``P``, the common block reduces to
``S^{-1} - S^{-1} P S^{-1}`` with ``S^{-1}`` the common block of ``A^{-1}``;
removed entries get zero rows and columns.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import __version__
from .basis import SEGMENT_NODES, eval_basis, reference_rule
from .deriv import derivatives
from .model import Layout, ModelSpec, ParameterState, VarianceComponents, Workspace, build_spec, workspace
from .optimizer import InnerLoopConfig
from .variance import FactoredHessian, OuterLoopConfig, free_coordinates, restrict, run_outer

FIT_SCHEMA = "jmpic.fit/1"
Z95 = float(stats.norm.ppf(0.975))


class IdentifiabilityError(ValueError):
    """The reduced negative Hessian is not positive definite."""


@dataclass
class FitResult:
    spec: ModelSpec
    state: ParameterState
    var: VarianceComponents
    covariance: np.ndarray
    active_set: tuple
    converged: bool
    names: list
    subjects: dict
    marginal: float = float("nan")
    history: list = field(default_factory=list)
    inner: list = field(default_factory=list)
    flags: list = field(default_factory=list)
    data_digest: str = ""

    @property
    def layout(self) -> Layout:
        return Layout(self.spec, self.state.kappa.shape[0])

    def se(self) -> np.ndarray:
        return np.sqrt(np.maximum(np.diag(self.covariance), 0.0))

    def index(self, name) -> int:
        return self.names.index(name) if isinstance(name, str) else int(name)

    def to_dict(self) -> dict:
        return {
            "schema": FIT_SCHEMA,
            "version": __version__,
            "spec": self.spec.to_dict(),
            "spec_digest": self.spec.digest(),
            "data_digest": self.data_digest,
            "converged": self.converged,
            "names": list(self.names),
            "state": self.state.to_dict(),
            "var": self.var.to_dict(),
            "covariance": self.covariance.tolist(),
            "active_set": list(self.active_set),
            "marginal": self.marginal,
            "subjects": self.subjects,
            "history": self.history,
            "inner": self.inner,
            "flags": list(self.flags),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True, default=_jsonable)

    @classmethod
    def from_dict(cls, d) -> "FitResult":
        if d.get("schema") != FIT_SCHEMA:
            raise ValueError(f"unsupported fit document schema {d.get('schema')!r}")
        spec = ModelSpec.from_dict(d["spec"])
        return cls(spec, ParameterState.from_dict(d["state"]), VarianceComponents.from_dict(d["var"]),
                   np.asarray(d["covariance"], dtype=float), tuple(d["active_set"]), bool(d["converged"]),
                   list(d["names"]), d["subjects"], float(d["marginal"]), d.get("history", []),
                   d.get("inner", []), list(d.get("flags", [])), d.get("data_digest", ""))

    @classmethod
    def from_json(cls, text) -> "FitResult":
        return cls.from_dict(json.loads(text))


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"cannot serialise {type(o).__name__}")


# covariance -------------------------------------------------------------------------

def sandwich_covariance(ws: Workspace, state, var, active=()) -> np.ndarray:
    """Covariance of (beta, gamma, theta, alpha) with active theta entries zeroed."""
    _, hess = derivatives(ws, state, var, hessian=True)
    Z = ws.lay.Z
    keep = free_coordinates(ws, active)
    fac = FactoredHessian(restrict(hess.F, keep))
    if not fac.positive_definite:
        w = np.linalg.eigvalsh(fac.S)
        raise IdentifiabilityError(f"negative Hessian not positive definite (smallest eigenvalue {w.min():.3g})")
    P = hess.Q_theta + sum(hess.Q_alpha, np.zeros((Z, Z)))
    Sinv = fac.common_block()
    red = Sinv - Sinv @ P[np.ix_(keep, keep)] @ Sinv
    cov = np.zeros((Z, Z))
    cov[np.ix_(keep, keep)] = 0.5 * (red + red.T)
    return cov


@dataclass
class WaldResult:
    estimate: float
    se: float
    z: float
    p: float
    ci95: tuple
    flag: str = ""


def wald_from(estimate: float, se: float) -> WaldResult:
    """Two-sided normal test of ``estimate = 0``."""
    if not se > 0:
        return WaldResult(estimate, se, float("nan"), float("nan"), (estimate, estimate),
                          "zero standard error (constrained or degenerate)")
    z = estimate / se
    p = float(2.0 * stats.norm.sf(abs(z)))
    return WaldResult(estimate, se, z, p, (estimate - Z95 * se, estimate + Z95 * se))


def wald(fit: FitResult, which) -> WaldResult:
    """Wald test for a parameter (index or name) or a contrast vector over the common parameters."""
    zeta = fit.state.zeta()
    if isinstance(which, (int, np.integer, str)):
        c = np.zeros(zeta.size)
        c[fit.index(which)] = 1.0
    else:
        c = np.asarray(which, dtype=float)
        if c.shape != zeta.shape:
            raise ValueError(f"contrast must have length {zeta.size}")
    est = float(c @ zeta)
    se = math.sqrt(max(float(c @ fit.covariance @ c), 0.0))
    return wald_from(est, se)


def hazard_ratio(fit: FitResult, which) -> tuple:
    """``(HR, lower, upper, p)`` for a regression coefficient."""
    w = wald(fit, which)
    return math.exp(w.estimate), math.exp(w.ci95[0]), math.exp(w.ci95[1]), w.p


# prediction -------------------------------------------------------------------------

@dataclass
class SurvivalCurve:
    grid: np.ndarray
    survival: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    cumhaz: np.ndarray


def _segments(spec: ModelSpec, grid):
    pts = [spec.baseline.breakpoints]
    for ls in spec.longitudinal:
        for b in (ls.time_basis, ls.random_basis):
            if b.family != "polynomial":
                pts.append(b.breakpoints)
    return np.unique(np.concatenate(pts + [[0.0, float(grid.max())]]))


def _cumhaz_with_gradient(fit: FitResult, x, w, grid, trajectory=None, kappa_row=None):
    """Cumulative hazard on ``grid`` and its gradient over the common parameters.

    With ``trajectory=None`` the model trajectory (mean plus ``kappa_row``)
    is used and contributes alpha derivatives; a user-supplied trajectory is
    treated as known.
    """
    spec, st = fit.spec, fit.state
    lay = fit.layout
    xq, wq = reference_rule(SEGMENT_NODES)
    bp = _segments(spec, grid)
    lo = np.clip(bp[None, :-1], 0.0, grid[:, None])
    hi = np.clip(bp[None, 1:], 0.0, grid[:, None])
    half = 0.5 * (hi - lo)
    nodes = (lo[:, :, None] + half[:, :, None] * (xq + 1.0)).reshape(len(grid), -1)
    wts = (half[:, :, None] * wq).reshape(len(grid), -1)
    psi = eval_basis(spec.baseline, nodes)
    h0 = psi @ st.theta
    x = np.asarray(x, dtype=float).reshape(lay.p)
    rel = np.full(nodes.shape, float(x @ st.beta) if lay.p else 0.0)
    zs = []
    if trajectory is None:
        krow = np.zeros(lay.C) if kappa_row is None else np.asarray(kappa_row, dtype=float)
        w = np.asarray(w, dtype=float)
        phis = []
        for r, ls in enumerate(spec.longitudinal):
            phi = ls.fixed_design(nodes, w)
            z = phi @ st.alpha[lay.alpha_local(r)] + ls.random_design(nodes) @ krow[lay.kappa_r[r]]
            zs.append(z)
            phis.append(phi)
    else:
        vals = np.asarray(trajectory(nodes.ravel()), dtype=float).reshape(nodes.size, -1)
        if vals.shape[1] != spec.q:
            raise ValueError(f"trajectory must return {spec.q} value(s) per time")
        zs = [vals[:, r].reshape(nodes.shape) for r in range(spec.q)]
        phis = None
    for r in range(spec.q):
        rel = rel + st.gamma[r] * zs[r]
    ew = wts * np.exp(rel)
    H = np.sum(ew * h0, axis=1)
    G = np.zeros((len(grid), lay.Z))
    G[:, lay.beta] = H[:, None] * x[None, :]
    for r in range(spec.q):
        G[:, lay.gamma.start + r] = np.sum(ew * h0 * zs[r], axis=1)
        if phis is not None:
            G[:, lay.alpha_r[r]] = st.gamma[r] * np.einsum("gk,gkb->gb", ew * h0, phis[r])
    G[:, lay.theta] = np.einsum("gk,gku->gu", ew, psi)
    return H, G


def _curve(fit, H, G, grid):
    var_log = np.einsum("gi,ij,gj->g", G, fit.covariance, G)
    with np.errstate(divide="ignore", invalid="ignore"):
        se_log = np.where(H > 0, np.sqrt(np.maximum(var_log, 0.0)) / H, 0.0)
    S = np.exp(-H)
    lower = np.exp(-H * np.exp(Z95 * se_log))
    upper = np.exp(-H * np.exp(-Z95 * se_log))
    return SurvivalCurve(grid, S, lower, upper, H)


def _check_grid(fit, grid):
    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    b = fit.spec.baseline
    if np.any(grid < 0) or np.any(grid > b.upper + 1e-12):
        raise ValueError(f"grid must lie in [0, {b.upper}], the support of the baseline hazard")
    return grid


def predict_survival(fit: FitResult, x, trajectory=None, grid=None, w=None) -> SurvivalCurve:
    """Population survival for fixed covariates ``x`` with a pointwise 95% band.

    ``trajectory`` is a callable ``z(t)`` returning one value per time (or
    ``q`` columns); by default the fitted mean trajectory for baseline
    longitudinal covariates ``w`` is used.  The band is built on the
    log-cumulative-hazard scale and ignores random-effect uncertainty.
    """
    grid = _check_grid(fit, grid)
    if w is None:
        w = np.zeros(max((j + 1 for ls in fit.spec.longitudinal for j, _ in ls.interactions), default=0))
    H, G = _cumhaz_with_gradient(fit, x, w, grid, trajectory)
    return _curve(fit, H, G, grid)


def conditional_from_survival(s_u: float, s_t: float) -> float:
    """``S(u) / S(t)``: probability of staying event-free to ``u`` given survival to ``t``."""
    if not s_t > 0:
        raise ValueError("S(t) is zero; conditional survival undefined")
    return s_u / s_t


def _subject(fit, i):
    subs = fit.subjects
    if not 0 <= i < len(subs["id"]):
        raise IndexError("subject index out of range")
    return np.asarray(subs["x"][i], dtype=float), np.asarray(subs["w"][i], dtype=float)


def conditional_survival(fit: FitResult, who, t: float, u: float) -> float:
    """``pi(u | t)`` for a fitted subject (index) or covariates ``{"x", "w"|"trajectory"}``."""
    if u < t:
        raise ValueError("horizon u must not precede t")
    grid = np.array([t, u], dtype=float)
    if isinstance(who, (int, np.integer)):
        _, S = predict_individual(fit, int(who), grid)
    else:
        S = predict_survival(fit, who.get("x", ()), who.get("trajectory"), grid, who.get("w")).survival
    return conditional_from_survival(float(S[1]), float(S[0]))


def predict_individual(fit: FitResult, subject_index: int, grid):
    """Fitted trajectory (``len(grid) x q``) and survival curve for one subject."""
    grid = _check_grid(fit, grid)
    x, w = _subject(fit, subject_index)
    st, lay = fit.state, fit.layout
    krow = st.kappa[subject_index]
    traj = np.zeros((len(grid), fit.spec.q))
    for r, ls in enumerate(fit.spec.longitudinal):
        traj[:, r] = ls.fixed_design(grid, w) @ st.alpha[lay.alpha_local(r)] + ls.random_design(grid) @ krow[lay.kappa_r[r]]
    H, _ = _cumhaz_with_gradient(fit, x, w, grid, None, krow)
    return traj, np.exp(-H)


def baseline_hazard(fit: FitResult, grid):
    """Estimated baseline hazard with a pointwise 95% Wald band.

    The band is ``h +- 1.96 se`` with the lower end clipped at zero.  A
    log-scale band cannot reach down to a true hazard that vanishes at the
    origin (e.g. ``t^3``), so the linear scale is used here.
    """
    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    lay = fit.layout
    psi = eval_basis(fit.spec.baseline, grid)
    h = psi @ fit.state.theta
    cov = fit.covariance[lay.theta, lay.theta]
    se = np.sqrt(np.maximum(np.einsum("gu,uv,gv->g", psi, cov, psi), 0.0))
    return h, np.maximum(h - Z95 * se, 0.0), h + Z95 * se


# end-to-end -------------------------------------------------------------------------

def fit_model(ds, spec: ModelSpec | None = None, cfg_inner: InnerLoopConfig = InnerLoopConfig(),
              cfg_outer: OuterLoopConfig = OuterLoopConfig(), **spec_kwargs) -> FitResult:
    """Run the full estimation and attach the sandwich covariance."""
    spec = build_spec(ds, **spec_kwargs) if spec is None else spec
    ws = workspace(spec, ds)
    res = run_outer(spec, ds, cfg_inner, cfg_outer)
    flags = list(res.flags)
    active = res.inner_traces[-1].active_set if res.inner_traces else ()
    try:
        cov = sandwich_covariance(ws, res.state, res.var, active)
    except IdentifiabilityError as e:
        flags.append(str(e))
        cov = np.full((ws.lay.Z, ws.lay.Z), np.nan)
    inner = [{"iterations": t.iterations, "converged": t.converged, "objective": t.objective_path[-1],
              "active_set": list(t.active_set), "flags": sorted(set(t.flags))} for t in res.inner_traces]
    subjects = {"id": [s.id for s in ds.subjects], "x": [list(s.x) for s in ds.subjects],
                "w": [list(s.long_fixed) for s in ds.subjects]}
    return FitResult(spec, res.state, res.var, cov, tuple(active), res.converged, ws.lay.names(spec, ds),
                     subjects, res.marginal, _clean_history(res.history), inner, flags, ds.digest())


def _clean_history(history):
    return json.loads(json.dumps(history, default=_jsonable))


def digest_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:16]
