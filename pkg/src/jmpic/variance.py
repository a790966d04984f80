"""Outer loop: variance components from the Laplace-approximate marginal likelihood.

Given the inner-loop maximiser, each variance component is updated by the
closed-form fixed point ``sigma^2 = quadratic form / (dimension - nu)`` where
``nu = tr(F^{-1} Q)`` is the effective number of parameters that component
spends.  All traces reuse one factorisation of the negative Hessian ``F``,
exploiting its arrowhead structure: per-subject random-effect blocks are
eliminated first and only the Schur complement over the common parameters is
inverted densely.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .deriv import Arrowhead, derivatives
from .model import ParameterState, VarianceComponents, Workspace, workspace
from .optimizer import InnerLoopConfig, InnerLoopTrace, initial_state, run_inner

SIGMA_EPS_FLOOR = 1e-10
NU_SLACK = 1e-6
# random-effect variances below this multiple of sigma_eps2 are treated as zero
KAPPA_FLOOR = 1e-6


@dataclass(frozen=True)
class OuterLoopConfig:
    outer_tol: float = 1e-3
    max_outer: int = 50
    dof_floor: float = 0.5

    def __post_init__(self):
        if not (self.outer_tol > 0 and self.max_outer > 0 and self.dof_floor > 0):
            raise ValueError("outer loop settings must be positive")


def _logdet_and_inverse(M):
    """``(log|det M|, M^{-1}, pd)`` for a stack of symmetric matrices.

    Uses Cholesky when every matrix is positive definite and absolute
    eigenvalues otherwise.
    """
    if M.shape[-1] == 0:
        return np.zeros(M.shape[:-2]), np.zeros_like(M), True
    try:
        L = np.linalg.cholesky(M)
        logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
        eye = np.broadcast_to(np.eye(M.shape[-1]), M.shape)
        return logdet, np.linalg.solve(M, eye), True
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(M)
        aw = np.maximum(np.abs(w), 1e-300)
        inv = np.einsum("...ij,...j,...kj->...ik", V, 1.0 / aw, V)
        return np.sum(np.log(aw), axis=-1), inv, False


class FactoredHessian:
    """Block inverse of an arrowhead matrix ``[[A, B], [B^T, blockdiag(D)]]``.

    ``S = A - sum_i B_i D_i^{-1} B_i^T``; then the common block of the inverse
    is ``S^{-1}``, subject ``i``'s own block is ``D_i^{-1} + W_i^T S^{-1} W_i``
    with ``W_i = B_i D_i^{-1}``, and the cross block is ``-S^{-1} W_i``.
    """

    def __init__(self, F: Arrowhead):
        self.F = F
        n, Z, C = F.B.shape
        self.n, self.Z, self.C = n, Z, C
        ld_D, self.Dinv, pd_D = _logdet_and_inverse(F.D) if C else (np.zeros(n), F.D, True)
        if C:
            self.W = np.matmul(F.B, self.Dinv)
            S = F.A - np.einsum("nzc,nyc->zy", self.W, F.B)
        else:
            self.W = np.zeros((n, Z, 0))
            S = F.A.copy()
        S = 0.5 * (S + S.T)
        self.S = S
        ld_S, self.Sinv, pd_S = _logdet_and_inverse(S)
        self.logdet = float(np.sum(ld_D) + ld_S)
        self.positive_definite = bool(pd_D and pd_S)

    def common_block(self):
        return self.Sinv

    def cross_blocks(self):
        return -np.einsum("zy,nyc->nzc", self.Sinv, self.W)

    def subject_blocks(self):
        if self.C == 0:
            return np.zeros((self.n, 0, 0))
        return self.Dinv + np.einsum("nzc,zy,nyd->ncd", self.W, self.Sinv, self.W)

    def trace(self, Q: Arrowhead, blocks=None) -> float:
        """``tr(F^{-1} Q)`` for an arrowhead ``Q`` with the same block shapes."""
        kk = self.subject_blocks() if blocks is None else blocks[0]
        zk = self.cross_blocks() if blocks is None else blocks[1]
        out = float(np.sum(self.Sinv * Q.A))
        if self.C:
            out += float(np.sum(kk * Q.D)) + 2.0 * float(np.sum(zk * Q.B))
        return out


@dataclass
class VarianceUpdate:
    var: VarianceComponents
    nu: dict
    denominators: dict
    flags: list = field(default_factory=list)


def _zeta_only(Q, n, C):
    Z = Q.shape[0]
    return Arrowhead(Q, np.zeros((n, Z, C)), np.zeros((n, C, C)))


def restrict(M: Arrowhead, keep) -> Arrowhead:
    """Arrowhead with the common coordinates limited to ``keep``."""
    return Arrowhead(M.A[np.ix_(keep, keep)], M.B[:, keep, :], M.D)


def free_coordinates(ws: Workspace, active) -> np.ndarray:
    """Common coordinates left after removing theta entries at active constraints."""
    keep = np.ones(ws.lay.Z, dtype=bool)
    keep[ws.lay.theta.start + np.asarray(active, dtype=int)] = False
    return np.flatnonzero(keep)


def effective_dimensions(ws: Workspace, state, var, hess=None, active=()):
    """``nu`` for every variance component, from one factorisation of ``F``.

    theta entries at active constraints are not free parameters and are
    removed from ``F`` and every ``Q`` first.
    """
    if hess is None:
        _, hess = derivatives(ws, state, var, hessian=True)
    keep = free_coordinates(ws, active)
    fac = FactoredHessian(restrict(hess.F, keep))
    lay = ws.lay
    n, C = ws.n, lay.C
    blocks = (fac.subject_blocks(), fac.cross_blocks())
    sub = np.ix_(keep, keep)
    nu = {"eps": fac.trace(restrict(hess.Q_eps, keep), blocks)}
    nu["theta"] = fac.trace(_zeta_only(hess.Q_theta[sub], n, C), blocks) if lay.m else 0.0
    nu["alpha"] = [fac.trace(_zeta_only(Q[sub], n, C), blocks) for Q in hess.Q_alpha]
    kk = blocks[0]
    nu["kappa"] = [float(np.sum(kk[:, j, j]) * hess.kappa_precision[j]) for j in range(C)]
    return nu, fac, hess


def _check_nu(value, dim, name, flags):
    if value < -NU_SLACK or value > dim + NU_SLACK:
        flags.append(f"nu_{name}={value:.6g} outside [0, {dim}]")
    return min(max(value, 0.0), float(dim))


def _ratio(num, dim, nu, floor, name, flags):
    den = dim - nu
    if den <= floor:
        flags.append(f"{name}: denominator {den:.4g} clamped to {floor}")
        den = floor
    return num / den


def variance_step(ws: Workspace, state, var, cfg: OuterLoopConfig = OuterLoopConfig(), hess=None, active=()):
    """One closed-form update of all variance components at ``state``."""
    nu, fac, hess = effective_dimensions(ws, state, var, hess, active)
    lay = ws.lay
    flags = []
    if not fac.positive_definite:
        flags.append("F not positive definite; traces use absolute eigenvalues")
    dens = {}

    res = ws.longitudinal_residuals(state)
    count = res.size
    nu_e = _check_nu(nu["eps"], count, "eps", flags)
    if count:
        s_eps = _ratio(float(np.sum(res * res)), count, nu_e, cfg.dof_floor, "sigma_eps2", flags)
    else:
        s_eps = var.sigma_eps2
        flags.append("sigma_eps2 held: no longitudinal records")
    if s_eps < SIGMA_EPS_FLOOR:
        flags.append("sigma_eps2 floored")
        s_eps = SIGMA_EPS_FLOOR
    dens["eps"] = count - nu_e

    s_theta = var.sigma_theta2
    if lay.m:
        quad = float(state.theta @ ws.R_theta @ state.theta)
        nu_t = _check_nu(nu["theta"], ws.rank_theta, "theta", flags)
        if quad > 0 and ws.rank_theta > 0:
            s_theta = _ratio(quad, ws.rank_theta, nu_t, cfg.dof_floor, "sigma_theta2", flags)
        else:
            flags.append("sigma_theta2 held: zero roughness")
        dens["theta"] = ws.rank_theta - nu_t

    s_alpha = []
    for r in range(ws.spec.q):
        ar = state.alpha[lay.alpha_local(r)]
        quad = float(ar @ ws.R_alpha[r] @ ar)
        rk = ws.rank_alpha[r]
        nu_a = _check_nu(nu["alpha"][r], rk, f"alpha{r}", flags)
        if quad > 0 and rk > 0:
            s_alpha.append(_ratio(quad, rk, nu_a, cfg.dof_floor, f"sigma_alpha2[{r}]", flags))
        else:
            s_alpha.append(var.sigma_alpha2[r])
            if rk > 0:
                flags.append(f"sigma_alpha2[{r}] held: zero roughness")
        dens[f"alpha{r}"] = rk - nu_a

    s_kappa = []
    kappa_floor = KAPPA_FLOOR * s_eps
    for j in range(lay.C):
        nu_k = _check_nu(nu["kappa"][j], ws.n, f"kappa{j}", flags)
        val = _ratio(float(np.sum(state.kappa[:, j] ** 2)), ws.n, nu_k, cfg.dof_floor, f"sigma_kappa2[{j}]", flags)
        if not val > kappa_floor:
            flags.append(f"sigma_kappa2[{j}] at boundary")
            val = kappa_floor
        s_kappa.append(val)
        dens[f"kappa{j}"] = ws.n - nu_k

    new = VarianceComponents(s_eps, s_theta, tuple(s_alpha), tuple(s_kappa))
    return VarianceUpdate(new, nu, dens, flags)


def update_variances(spec, state, var, ds, cfg: OuterLoopConfig = OuterLoopConfig()) -> VarianceComponents:
    """Closed-form variance-component update at an inner-loop maximiser."""
    return variance_step(workspace(spec, ds), state, var, cfg).var


def _prior_constants(ws: Workspace, var):
    """Log normalising constants of the measurement, random-effect and penalty densities."""
    lay = ws.lay
    out = -0.5 * ws.N * ws.spec.q * math.log(2 * math.pi)
    out -= 0.5 * ws.n * lay.C * math.log(2 * math.pi)
    if lay.m and ws.rank_theta:
        out += _pseudo_logdet(ws.R_theta) * 0.5 - 0.5 * ws.rank_theta * math.log(2 * math.pi * var.sigma_theta2)
    for r in range(ws.spec.q):
        rk = ws.rank_alpha[r]
        if rk:
            out += 0.5 * _pseudo_logdet(ws.R_alpha[r]) - 0.5 * rk * math.log(2 * math.pi * var.sigma_alpha2[r])
    return out


def _pseudo_logdet(R):
    w = np.linalg.eigvalsh(R)
    tol = max(R.shape) * np.finfo(float).eps * max(float(np.max(np.abs(w))), 1.0)
    return float(np.sum(np.log(w[w > tol])))


def laplace_value(ws: Workspace, state, var, hess=None, fac=None):
    """Laplace marginal log-likelihood; returns ``(value, positive_definite)``.

    Fixed effects carry flat priors (the penalised coefficients carry their
    roughness prior), so every coordinate of the parameter vector is
    integrated out.
    """
    if fac is None:
        if hess is None:
            _, hess = derivatives(ws, state, var, hessian=True)
        fac = FactoredHessian(hess.F)
    dim = ws.lay.Z + ws.n * ws.lay.C
    phi = ws.objective(state, var)
    value = phi + _prior_constants(ws, var) + 0.5 * dim * math.log(2 * math.pi) - 0.5 * fac.logdet
    return value, fac.positive_definite


def marginal_loglik(spec, state, var, ds) -> float:
    """Laplace-approximate marginal log-likelihood at ``state``."""
    value, pd = laplace_value(workspace(spec, ds), state, var)
    if not pd:
        import warnings

        warnings.warn("negative Hessian is not positive definite; log-determinant uses |eigenvalues|")
    return value


def initial_variances(ws: Workspace) -> VarianceComponents:
    """Scale-free start: residual variance of the fixed-effect least-squares fit."""
    lay = ws.lay
    rss, dof = 0.0, 0
    for r in range(ws.spec.q):
        if ws.N:
            X = ws.obs_phi[r]
            coef, *_ = np.linalg.lstsq(X, ws.obs_values[:, r], rcond=None)
            res = ws.obs_values[:, r] - X @ coef
            rss += float(res @ res)
            dof += max(ws.N - X.shape[1], 1)
    s_eps = rss / dof if dof and rss > 0 else 1.0
    return VarianceComponents(s_eps, 0.5, tuple(0.5 for _ in range(ws.spec.q)), tuple(0.25 * s_eps for _ in range(lay.C)))


def longitudinal_prefit(ws: Workspace, cfg_inner: InnerLoopConfig, cfg_outer: OuterLoopConfig):
    """Fit the measurement model alone (no survival part) from the default start.

    Returns variance components and a state for the joint model: the
    measurement-model estimates for sigma_eps, sigma_kappa, alpha and kappa,
    the default start for everything else.
    """
    from .model import ModelSpec

    spec = ws.spec
    var_default = initial_variances(ws)
    state = initial_state(ws)
    if not spec.survival or ws.N == 0:
        return var_default, state
    sub = ModelSpec(spec.baseline, spec.longitudinal, spec.p, survival=False)
    sub_ws = Workspace(sub, ws.ds)
    res = _outer(sub_ws, var_default, initial_state(sub_ws), cfg_inner, cfg_outer)
    var = replace(var_default, sigma_eps2=res.var.sigma_eps2, sigma_kappa2=res.var.sigma_kappa2,
                  sigma_alpha2=res.var.sigma_alpha2)
    state = replace(state, alpha=res.state.alpha.copy(), kappa=res.state.kappa.copy())
    return var, state


@dataclass
class OuterResult:
    state: ParameterState
    var: VarianceComponents
    converged: bool
    outer_iterations: int
    inner_traces: list
    history: list
    flags: list
    marginal: float


def _relative_change(a: VarianceComponents, b: VarianceComponents) -> float:
    va, vb = a.as_vector(), b.as_vector()
    return float(np.max(np.abs(vb - va) / va)) if va.size else 0.0


def run_outer(spec, ds, cfg_inner: InnerLoopConfig = InnerLoopConfig(), cfg_outer: OuterLoopConfig = OuterLoopConfig(),
              var0: VarianceComponents | None = None, state0: ParameterState | None = None) -> OuterResult:
    """Alternate the inner loop and the variance updates until both settle.

    Without explicit starting values the measurement model is fitted first
    and the joint fit starts from its estimates.
    """
    ws = workspace(spec, ds)
    if var0 is None or state0 is None:
        v, s = longitudinal_prefit(ws, cfg_inner, cfg_outer)
        var0 = v if var0 is None else var0
        state0 = s if state0 is None else state0
    return _outer(ws, var0, state0, cfg_inner, cfg_outer)


def _outer(ws, var, state, cfg_inner, cfg_outer):
    traces, history, flags = [], [], []
    best = None
    converged = False
    k = 0
    for k in range(1, cfg_outer.max_outer + 1):
        start = (state, var, -np.inf, False)
        state, trace = run_inner(ws, state, var, cfg_inner)
        traces.append(trace)
        try:
            if not np.isfinite(ws.objective(state, var)):
                raise ValueError("objective not finite")
            _, hess = derivatives(ws, state, var, hessian=True)
            step = variance_step(ws, state, var, cfg_outer, hess, trace.active_set)
        except (ValueError, np.linalg.LinAlgError) as e:
            # the inner loop ran off along a direction with no maximum
            flags.append(f"numerical breakdown at outer iteration {k}: {e}")
            best = best or start
            break
        fac = FactoredHessian(restrict(hess.F, free_coordinates(ws, trace.active_set)))
        value, _ = laplace_value(ws, state, var, fac=fac)
        change = _relative_change(var, step.var)
        history.append({"iteration": k, "var": var.to_dict(), "marginal": value, "nu": step.nu,
                        "denominators": step.denominators, "relative_change": change,
                        "inner_iterations": trace.iterations, "inner_converged": trace.converged,
                        "flags": list(step.flags)})
        for f in step.flags:
            if f not in flags:
                flags.append(f)
        if best is None or (trace.converged and value > best[2]) or not best[3]:
            best = (state, var, value, trace.converged)
        if change < cfg_outer.outer_tol and trace.converged:
            converged = True
            best = (state, var, value, True)
            break
        var = step.var
    if not converged:
        flags.append("outer loop did not converge")
    state, var, value, _ = best
    return OuterResult(state, var, converged, k, traces, history, flags, value)
