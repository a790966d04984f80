"""Inner loop: cyclic Newton and multiplicative-iterative updates.

One cycle updates beta, gamma, theta and then the longitudinal coefficients.
Every sub-update proposes a direction and accepts a step by Armijo
backtracking, so the penalised objective never decreases.  theta uses a
multiplicative step ``theta + w * theta / d * g`` that cannot leave the
non-negative orthant for ``w <= 1``.

By default alpha and kappa move together in one Newton step, solved through
the Schur complement of the kappa blocks.  Updating them one after the other
converges very slowly when the random intercept and the fixed intercept are
nearly confounded (large random-effect variance relative to the measurement
error), which is the usual regime; ``joint_random=False`` restores the
separate alpha and kappa updates.

The multiplicative theta step alone needs thousands of cycles to meet a
1e-5 tolerance (it zigzags against the gamma/theta scale trade-off).  Each
cycle therefore also tries a projected Newton step on (beta, gamma, theta)
that keeps pinned theta entries at zero; it is accepted only through the
same Armijo test.  ``survival_newton=False`` drops it.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .deriv import UPSILON, derivatives, mi_parts
from .model import EXACT, INTERVAL, LEFT, ParameterState, Workspace


@dataclass(frozen=True)
class InnerLoopConfig:
    tol: float = 1e-5
    max_iter: int = 500
    contraction: float = 0.5
    slope_fraction: float = 1e-4
    max_backtracks: int = 30
    mi_upsilon: float = UPSILON
    joint_random: bool = True
    eig_floor: float = 1e-8
    theta_restart: float = 1e-4
    survival_newton: bool = True

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if not 0 < self.contraction < 1:
            raise ValueError("contraction must lie in (0, 1)")


@dataclass
class StepRecord:
    block: str
    before: float
    after: float
    step: float
    backtracks: int


@dataclass
class InnerLoopTrace:
    iterations: int = 0
    objective_path: list = field(default_factory=list)
    converged: bool = False
    active_set: tuple = ()
    steps: list = field(default_factory=list)
    flags: list = field(default_factory=list)

    def min_increment(self) -> float:
        """Smallest objective change over all recorded sub-updates."""
        if not self.steps:
            return 0.0
        return min(s.after - s.before for s in self.steps)


def _modified_inverse(M, floor):
    """Inverse of a symmetric matrix after flooring its eigenvalues.

    A matrix with non-finite entries (overflow far from the optimum) gives a
    zero inverse, i.e. no step.
    """
    if not np.all(np.isfinite(M)):
        return np.zeros_like(M), True
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    lo = floor * max(1.0, float(np.max(np.abs(w))) if w.size else 1.0)
    clipped = bool(np.any(w < lo))
    w = np.maximum(w, lo)
    return (V / w) @ V.T, clipped


def _batched_modified_inverse(M, floor):
    if not np.all(np.isfinite(M)):
        return np.zeros_like(M), True
    w, V = np.linalg.eigh(0.5 * (M + np.swapaxes(M, 1, 2)))
    scale = np.maximum(1.0, np.max(np.abs(w), axis=1)) if w.shape[1] else np.ones(len(w))
    lo = floor * scale
    clipped = bool(np.any(w < lo[:, None]))
    w = np.maximum(w, lo[:, None])
    return np.matmul(V / w[:, None, :], np.swapaxes(V, 1, 2)), clipped


def _line_search(ws, var, cfg, phi0, make, slope, block, trace):
    """Armijo backtracking along ``make(step)``; returns the accepted state."""
    if not (slope > 0 and np.isfinite(slope)):
        return None, phi0
    omega = 1.0
    for k in range(cfg.max_backtracks + 1):
        cand = make(omega)
        phi = ws.objective(cand, var)
        if np.isfinite(phi) and phi >= phi0 + cfg.slope_fraction * omega * slope:
            if trace is not None:
                trace.steps.append(StepRecord(block, phi0, phi, omega, k))
            return cand, phi
        omega *= cfg.contraction
    if trace is not None:
        trace.steps.append(StepRecord(block, phi0, phi0, 0.0, cfg.max_backtracks))
    return None, phi0


def _zeta_block_update(ws, state, var, cfg, sl, block, trace, phi0):
    if sl.stop == sl.start:
        return state, phi0
    score, hess = derivatives(ws, state, var, hessian=True)
    g = score.zeta()[sl]
    Finv, clipped = _modified_inverse(hess.F.A[sl, sl], cfg.eig_floor)
    if clipped and trace is not None:
        trace.flags.append(f"{block}: Hessian modified")
    direction = Finv @ g
    z0 = state.zeta()

    def make(w):
        z = z0.copy()
        z[sl] += w * direction
        return state.with_zeta(z, ws.lay)

    new, phi = _line_search(ws, var, cfg, phi0, make, float(g @ direction), block, trace)
    return (new if new is not None else state), phi


def update_beta(ws: Workspace, state, var, cfg=InnerLoopConfig(), trace=None, phi0=None):
    phi0 = ws.objective(state, var) if phi0 is None else phi0
    return _zeta_block_update(ws, state, var, cfg, ws.lay.beta, "beta", trace, phi0)


def update_gamma(ws: Workspace, state, var, cfg=InnerLoopConfig(), trace=None, phi0=None):
    phi0 = ws.objective(state, var) if phi0 is None else phi0
    return _zeta_block_update(ws, state, var, cfg, ws.lay.gamma, "gamma", trace, phi0)


def update_alpha(ws: Workspace, state, var, cfg=InnerLoopConfig(), trace=None, phi0=None):
    phi0 = ws.objective(state, var) if phi0 is None else phi0
    return _zeta_block_update(ws, state, var, cfg, ws.lay.alpha, "alpha", trace, phi0)


def theta_direction(ws: Workspace, state, var, upsilon=UPSILON):
    pos, neg = mi_parts(ws, state, var)
    g = pos - neg
    return state.theta / (neg + upsilon) * g, g


def update_theta(ws: Workspace, state, var, cfg=InnerLoopConfig(), trace=None, phi0=None):
    phi0 = ws.objective(state, var) if phi0 is None else phi0
    if ws.lay.m == 0:
        return state, phi0
    direction, g = theta_direction(ws, state, var, cfg.mi_upsilon)
    th0 = state.theta

    def make(w):
        return replace(state, theta=np.maximum(th0 + w * direction, 0.0))

    new, phi = _line_search(ws, var, cfg, phi0, make, float(g @ direction), "theta", trace)
    return (new if new is not None else state), phi


def update_kappa(ws: Workspace, state, var, cfg=InnerLoopConfig(), trace=None, phi0=None):
    """Per-subject Newton steps for the random effects with one shared step size."""
    phi0 = ws.objective(state, var) if phi0 is None else phi0
    if ws.lay.C == 0:
        return state, phi0
    score, hess = derivatives(ws, state, var, hessian=True)
    gk = score.g_kappa
    Dinv, clipped = _batched_modified_inverse(hess.F.D, cfg.eig_floor)
    if clipped and trace is not None:
        trace.flags.append("kappa: Hessian modified")
    direction = np.einsum("nij,nj->ni", Dinv, gk)
    k0 = state.kappa

    def make(w):
        return replace(state, kappa=k0 + w * direction)

    new, phi = _line_search(ws, var, cfg, phi0, make, float(np.sum(gk * direction)), "kappa", trace)
    return (new if new is not None else state), phi


def update_random_joint(ws: Workspace, state, var, cfg=InnerLoopConfig(), trace=None, phi0=None):
    """One Newton step in ``(alpha, kappa)`` jointly, eliminating kappa per subject."""
    phi0 = ws.objective(state, var) if phi0 is None else phi0
    lay = ws.lay
    if lay.B == 0 and lay.C == 0:
        return state, phi0
    score, hess = derivatives(ws, state, var, hessian=True)
    ga, gk = score.g_alpha, score.g_kappa
    sa = lay.alpha
    if lay.C:
        Dinv, c1 = _batched_modified_inverse(hess.F.D, cfg.eig_floor)
        Ba = hess.F.B[:, sa, :]
        W = np.matmul(Ba, Dinv)  # n x B x C
        S = hess.F.A[sa, sa] - np.einsum("nbc,ndc->bd", W, Ba)
        rhs = ga - np.einsum("nbc,nc->b", W, gk)
    else:
        S, rhs, c1 = hess.F.A[sa, sa], ga, False
    Sinv, c2 = _modified_inverse(S, cfg.eig_floor) if lay.B else (np.zeros((0, 0)), False)
    if (c1 or c2) and trace is not None:
        trace.flags.append("alpha/kappa: Hessian modified")
    da = Sinv @ rhs
    if lay.C:
        dk = np.einsum("nij,nj->ni", Dinv, gk - np.einsum("nbc,b->nc", Ba, da))
    else:
        dk = np.zeros_like(state.kappa)
    a0, k0 = state.alpha, state.kappa
    slope = float(ga @ da + np.sum(gk * dk))

    def make(w):
        return replace(state, alpha=a0 + w * da, kappa=k0 + w * dk)

    new, phi = _line_search(ws, var, cfg, phi0, make, slope, "alpha+kappa", trace)
    return (new if new is not None else state), phi


def update_survival_newton(ws: Workspace, state, var, cfg=InnerLoopConfig(), trace=None, phi0=None):
    """Projected Newton step on (beta, gamma, theta) with theta held at zero where pinned.

    theta entries at zero with a non-positive gradient are left out; the
    candidate is projected back onto theta >= 0 before the Armijo test.
    """
    phi0 = ws.objective(state, var) if phi0 is None else phi0
    lay = ws.lay
    if lay.m == 0:
        return state, phi0
    score, hess = derivatives(ws, state, var, hessian=True)
    g = score.zeta()
    th = state.theta
    keep = np.ones(lay.Z, dtype=bool)
    keep[lay.alpha] = False
    pinned = (th <= 1e-12) & (score.g_theta <= 0)
    keep[lay.theta.start + np.flatnonzero(pinned)] = False
    idx = np.flatnonzero(keep)
    Finv, clipped = _modified_inverse(hess.F.A[np.ix_(idx, idx)], cfg.eig_floor)
    if clipped and trace is not None:
        trace.flags.append("survival: Hessian modified")
    direction = np.zeros(lay.Z)
    direction[idx] = Finv @ g[idx]
    z0 = state.zeta()
    ts = lay.theta

    def make(w):
        z = z0 + w * direction
        z[ts] = np.maximum(z[ts], 0.0)
        return state.with_zeta(z, lay)

    new, phi = _line_search(ws, var, cfg, phi0, make, float(g @ direction), "survival", trace)
    return (new if new is not None else state), phi


def detect_active(state, g_theta, theta_tol=1e-2, grad_tol=1e-2) -> tuple:
    """theta indices held at the boundary: small value and clearly negative gradient."""
    th = np.asarray(state.theta if hasattr(state, "theta") else state)
    g = np.asarray(g_theta.g_theta if hasattr(g_theta, "g_theta") else g_theta)
    return tuple(int(u) for u in np.flatnonzero((th < theta_tol) & (g < -grad_tol)))


def _restart_zero_theta(ws, state, var, cfg, trace, phi0):
    """Move exact-zero theta entries with positive gradient off the boundary."""
    th = state.theta
    if th.size == 0 or not np.any(th == 0.0) or th.max() <= 0:
        return state, phi0, False
    score, _ = derivatives(ws, state, var, hessian=False)
    cand = np.flatnonzero((th == 0.0) & (score.g_theta > 0))
    if cand.size == 0:
        return state, phi0, False
    bump = np.zeros_like(th)
    bump[cand] = cfg.theta_restart * th.max()

    def make(w):
        return replace(state, theta=th + w * bump)

    new, phi = _line_search(ws, var, cfg, phi0, make, float(score.g_theta @ bump), "theta-restart", trace)
    if new is None:
        return state, phi0, False
    trace.flags.append(f"theta restart at {cand.tolist()}")
    return new, phi, True


def initial_state(ws: Workspace) -> ParameterState:
    """Feasible starting point: zero regression effects, flat baseline, OLS trajectories."""
    lay = ws.lay
    n = ws.n
    theta = np.zeros(lay.m)
    if lay.m:
        kind = ws.kind
        events = np.sum(kind != 2)
        exposure = np.where(kind == EXACT, ws.t_left, 0.0)
        exposure = exposure + np.where(kind == 2, ws.t_left, 0.0)
        exposure = exposure + np.where((kind == INTERVAL) | (kind == LEFT), 0.5 * (ws.t_left + ws.t_right), 0.0)
        rate = max(events, 1) / max(float(np.sum(exposure)), 1e-12)
        basis = ws.spec.baseline
        if basis.family == "indicator":
            theta = np.full(lay.m, rate)
        else:
            theta = np.full(lay.m, rate * (basis.upper - basis.lower) / lay.m)
    alpha = np.zeros(lay.B)
    for r in range(ws.spec.q):
        if ws.N:
            coef, *_ = np.linalg.lstsq(ws.obs_phi[r], ws.obs_values[:, r], rcond=None)
            alpha[lay.alpha_local(r)] = coef
    return ParameterState(np.zeros(lay.p), np.zeros(lay.q), theta, alpha, np.zeros((n, lay.C)))


def run_inner(ws: Workspace, state0, var, cfg: InnerLoopConfig = InnerLoopConfig()):
    """Cycle the block updates until the largest parameter change is below ``cfg.tol``."""
    ws.check_state(state0)
    phi = ws.objective(state0, var)
    if not np.isfinite(phi):
        raise ValueError("objective is not finite at the starting state")
    trace = InnerLoopTrace(objective_path=[phi])
    state = state0
    lay = ws.lay
    for it in range(1, cfg.max_iter + 1):
        old = state
        state, phi = update_beta(ws, state, var, cfg, trace, phi)
        state, phi = update_gamma(ws, state, var, cfg, trace, phi)
        state, phi = update_theta(ws, state, var, cfg, trace, phi)
        if cfg.survival_newton:
            state, phi = update_survival_newton(ws, state, var, cfg, trace, phi)
        if cfg.joint_random:
            state, phi = update_random_joint(ws, state, var, cfg, trace, phi)
        else:
            state, phi = update_alpha(ws, state, var, cfg, trace, phi)
            state, phi = update_kappa(ws, state, var, cfg, trace, phi)
        trace.objective_path.append(phi)
        trace.iterations = it
        if state.max_abs_diff(old) < cfg.tol:
            state, phi, moved = _restart_zero_theta(ws, state, var, cfg, trace, phi)
            if not moved:
                trace.converged = True
                break
    score, _ = derivatives(ws, state, var, hessian=False)
    trace.active_set = detect_active(state, score.g_theta) if lay.m else ()
    return state, trace
