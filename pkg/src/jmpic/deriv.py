"""Analytic score and negative Hessian of the penalised log-likelihood.

Each subject contributes through a local parameter vector
``(beta, gamma, theta, alpha, kappa_i)``.  Writing the integrand of the
cumulative hazard as ``h0(s) exp(E(s))`` with ``E = x'beta + sum_r gamma_r
z_r(s)``, every derivative of an integral ``I`` follows from

* ``dI/dv = int h0 e^E J``, with ``J = dE/dv`` for the non-baseline coordinates,
* ``dI/dtheta_u = int psi_u e^E``,
* ``d2I/dv dv' = int h0 e^E (J J' + d2E/dv dv')``,
* ``d2I/dtheta dv = int psi e^E J'`` and ``d2I/dtheta^2 = 0``.

``d2E`` is non-zero only between ``gamma_r`` and ``alpha_r`` (``phi_r``) and
between ``gamma_r`` and ``kappa_ir`` (``xi_r``).

The negative Hessian has an arrowhead layout: a dense ``zeta`` block ``A``,
per-subject coupling blocks ``B_i`` and per-subject ``kappa`` blocks ``D_i``.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .model import H0_FLOOR, Workspace, workspace

UPSILON = 1e-3


@dataclass
class ScoreBlocks:
    g_beta: np.ndarray
    g_gamma: np.ndarray
    g_theta: np.ndarray
    g_alpha: np.ndarray
    g_kappa: np.ndarray  # n x C

    def zeta(self) -> np.ndarray:
        return np.concatenate([self.g_beta, self.g_gamma, self.g_theta, self.g_alpha])

    def eta(self) -> np.ndarray:
        return np.concatenate([self.zeta(), self.g_kappa.ravel()])


@dataclass
class Arrowhead:
    """Symmetric matrix over ``(zeta, kappa_1, ..., kappa_n)`` with no cross-subject kappa blocks."""

    A: np.ndarray  # Z x Z
    B: np.ndarray  # n x Z x C
    D: np.ndarray  # n x C x C

    def dense(self) -> np.ndarray:
        n, Z, C = self.B.shape
        F = np.zeros((Z + n * C, Z + n * C))
        F[:Z, :Z] = self.A
        for i in range(n):
            sl = slice(Z + i * C, Z + (i + 1) * C)
            F[:Z, sl] = self.B[i]
            F[sl, :Z] = self.B[i].T
            F[sl, sl] = self.D[i]
        return F

    def __add__(self, other: "Arrowhead") -> "Arrowhead":
        return Arrowhead(self.A + other.A, self.B + other.B, self.D + other.D)


@dataclass
class HessianAssembly:
    """Negative Hessian ``F`` of the penalised objective and its decomposition.

    ``F = H + Q_theta + sum_r Q_alpha[r] + Q_eps + sum_j Q_kappa[j]`` where
    ``H`` is minus the Hessian of the survival terms, ``Q_theta`` and
    ``Q_alpha`` come from the roughness penalties, ``Q_eps`` from the
    measurement model and ``Q_kappa[j]`` from the prior of the ``j``-th
    random-effect coordinate (the same for every subject).
    """

    F: Arrowhead
    H: Arrowhead
    Q_theta: np.ndarray
    Q_alpha: list
    Q_eps: Arrowhead
    kappa_precision: np.ndarray  # length C

    def dense(self) -> np.ndarray:
        return self.F.dense()

    def Q_kappa(self, j: int) -> Arrowhead:
        n, Z, C = self.F.B.shape
        D = np.zeros((n, C, C))
        D[:, j, j] = self.kappa_precision[j]
        return Arrowhead(np.zeros((Z, Z)), np.zeros((n, Z, C)), D)

    def reassemble(self) -> Arrowhead:
        n, Z, C = self.F.B.shape
        total = self.H + self.Q_eps
        A = total.A + self.Q_theta + sum(self.Q_alpha, np.zeros((Z, Z)))
        D = total.D.copy()
        idx = np.arange(C)
        D[:, idx, idx] += self.kappa_precision[None, :]
        return Arrowhead(A, total.B, D)


# per-region integrals --------------------------------------------------------------

def region_derivatives(ws: Workspace, reg, state, hessian=True):
    """Integral over a region and its local gradient (and Hessian) per subject."""
    lay = ws.lay
    z = ws._traj(reg, state)
    E = ws._exponent(reg, state, z)
    eE = np.exp(E)
    h0 = reg["psi"] @ state.theta
    wE = reg["w"] * eE
    wg = wE * h0
    I = wg.sum(axis=1)
    J = ws._J(reg, state, z)
    nr = len(reg["sub"])
    g = np.zeros((nr, lay.d))
    g[:, ws.nt_index] = np.einsum("nk,nkj->nj", wg, J)
    g[:, ws.th_index] = np.einsum("nk,nku->nu", wE, reg["psi"])
    if not hessian:
        return I, g, None
    H = np.zeros((nr, lay.d, lay.d))
    Hnn = np.matmul(np.swapaxes(J * wg[..., None], 1, 2), J)
    for r in range(ws.spec.q):
        gpos = ws.j_gamma + r
        sphi = np.einsum("nk,nkb->nb", wg, reg["phi"][r])
        a0 = ws.j_alpha[r]
        Hnn[:, gpos, a0:a0 + sphi.shape[1]] += sphi
        Hnn[:, a0:a0 + sphi.shape[1], gpos] += sphi
        sxi = np.einsum("nk,nkc->nc", wg, reg["xi"][r])
        k0 = ws.j_kappa[r]
        Hnn[:, gpos, k0:k0 + sxi.shape[1]] += sxi
        Hnn[:, k0:k0 + sxi.shape[1], gpos] += sxi
    nt, th = ws.nt_index, ws.th_index
    H[:, nt[:, None], nt[None, :]] = Hnn
    Htn = np.matmul(np.swapaxes(reg["psi"] * wE[..., None], 1, 2), J)
    H[:, th[:, None], nt[None, :]] = Htn
    H[:, nt[:, None], th[None, :]] = np.swapaxes(Htn, 1, 2)
    return I, g, H


def _event_parts(ws: Workspace, state, hessian=True):
    """Gradient/Hessian of ``log h0(t) + E(t)`` at exact event times."""
    lay = ws.lay
    idx = ws.idx_ex
    ne = idx.size
    h0 = ws.ev_psi @ state.theta
    hf = np.maximum(h0, H0_FLOOR)
    z = ws._event_traj(state)
    g = np.zeros((ne, lay.d))
    g[:, ws.th_index] = ws.ev_psi / hf[:, None]
    parts = [ws.X[idx], np.stack(z, axis=-1) if z else np.zeros((ne, 0))]
    parts += [state.gamma[r] * ws.ev_phi[r] for r in range(ws.spec.q)]
    parts += [state.gamma[r] * ws.ev_xi[r] for r in range(ws.spec.q)]
    g[:, ws.nt_index] = np.concatenate(parts, axis=1)
    if not hessian:
        return g, None
    H = np.zeros((ne, lay.d, lay.d))
    th = ws.th_index
    H[:, th[:, None], th[None, :]] = -(ws.ev_psi[:, :, None] * ws.ev_psi[:, None, :]) / (hf ** 2)[:, None, None]
    for r in range(ws.spec.q):
        gpos = lay.gamma.start + r
        a = lay.alpha_r[r]
        H[:, gpos, a] += ws.ev_phi[r]
        H[:, a, gpos] += ws.ev_phi[r]
        k = slice(lay.Z + lay.kappa_r[r].start, lay.Z + lay.kappa_r[r].stop)
        H[:, gpos, k] += ws.ev_xi[r]
        H[:, k, gpos] += ws.ev_xi[r]
    return g, H


def _interval_coefficient(I2):
    """``s = 1/expm1(I2)``, the derivative of ``log(1 - exp(-I2))``."""
    with np.errstate(over="ignore", divide="ignore"):
        return 1.0 / np.expm1(I2)


def survival_local(ws: Workspace, state, hessian=True):
    """Per-subject gradient and Hessian of the survival log-likelihood terms."""
    lay = ws.lay
    n = ws.n
    I1, g1, H1 = region_derivatives(ws, ws.reg1, state, hessian)
    G = -g1
    Hl = -H1 if hessian else None
    if ws.idx_ex.size:
        ge, He = _event_parts(ws, state, hessian)
        G[ws.idx_ex] += ge
        if hessian:
            Hl[ws.idx_ex] += He
    if ws.idx2.size:
        I2, g2, H2 = region_derivatives(ws, ws.reg2, state, hessian)
        s = _interval_coefficient(I2)
        G[ws.idx2] += s[:, None] * g2
        if hessian:
            Hl[ws.idx2] += s[:, None, None] * H2 - (s * (1.0 + s))[:, None, None] * (g2[:, :, None] * g2[:, None, :])
    return G, Hl


def _kappa_accumulate(ws, values):
    """Sum observation-level rows per subject."""
    out = np.zeros((ws.n, values.shape[1]))
    for j in range(values.shape[1]):
        out[:, j] = np.bincount(ws.obs_subject, weights=values[:, j], minlength=ws.n)
    return out


def derivatives(ws: Workspace, state, var, hessian=True):
    """Score blocks and (optionally) the negative Hessian assembly."""
    lay = ws.lay
    n, Z, C = ws.n, lay.Z, lay.C
    if ws.spec.survival:
        G, Hl = survival_local(ws, state, hessian)
    else:
        G = np.zeros((n, lay.d))
        Hl = np.zeros((n, lay.d, lay.d)) if hessian else None
    gz = G[:, :Z].sum(axis=0)
    gk = G[:, Z:].copy()
    if lay.m:
        gz[lay.theta] -= (ws.R_theta @ state.theta) / var.sigma_theta2
    res = ws.longitudinal_residuals(state)
    for r in range(ws.spec.q):
        a = lay.alpha_r[r]
        ar = state.alpha[lay.alpha_local(r)]
        gz[a] -= (ws.R_alpha[r] @ ar) / var.sigma_alpha2[r]
        if ws.N:
            gz[a] += ws.obs_phi[r].T @ res[:, r] / var.sigma_eps2
            gk[:, lay.kappa_r[r]] += _kappa_accumulate(ws, ws.obs_xi[r] * res[:, r:r + 1]) / var.sigma_eps2
    prec = 1.0 / np.asarray(var.sigma_kappa2, dtype=float).reshape(C)
    gk -= state.kappa * prec[None, :]
    score = ScoreBlocks(gz[lay.beta], gz[lay.gamma], gz[lay.theta], gz[lay.alpha], gk)
    if not hessian:
        return score, None

    Hs = Arrowhead(-Hl[:, :Z, :Z].sum(axis=0), -Hl[:, :Z, Z:], -Hl[:, Z:, Z:])
    Qt = np.zeros((Z, Z))
    if lay.m:
        Qt[lay.theta, lay.theta] = ws.R_theta / var.sigma_theta2
    Qa = []
    Ae = np.zeros((Z, Z))
    Be = np.zeros((n, Z, C))
    De = np.zeros((n, C, C))
    for r in range(ws.spec.q):
        a = lay.alpha_r[r]
        k = lay.kappa_r[r]
        Q = np.zeros((Z, Z))
        Q[a, a] = ws.R_alpha[r] / var.sigma_alpha2[r]
        Qa.append(Q)
        Ae[a, a] = ws.gram_aa[r] / var.sigma_eps2
        Be[:, a, k] = ws.gram_ak[r] / var.sigma_eps2
        De[:, k, k] = ws.gram_kk[r] / var.sigma_eps2
    Qe = Arrowhead(Ae, Be, De)
    hess = HessianAssembly(Hs, Hs, Qt, Qa, Qe, prec)
    hess.F = hess.reassemble()
    return score, hess


def mi_parts(ws: Workspace, state, var):
    """Split the theta gradient into its positive and negative terms.

    Returns ``(pos, neg)`` with ``g_theta = pos - neg`` and both non-negative.
    The negative terms are the cumulative-hazard contributions (scaled by
    ``1 + 1/expm1(dH)`` for interval censoring) plus the positive part of the
    penalty gradient.
    """
    lay = ws.lay
    m = lay.m
    pos = np.zeros(m)
    neg = np.zeros(m)
    if m == 0:
        return pos, neg
    th = ws.th_index
    _, g1, _ = region_derivatives(ws, ws.reg1, state, hessian=False)
    d1 = g1[:, th]
    scale = np.ones(ws.n)
    if ws.idx2.size:
        I2, g2, _ = region_derivatives(ws, ws.reg2, state, hessian=False)
        s = _interval_coefficient(I2)
        scale[ws.idx2] += s
        pos += (s[:, None] * (d1[ws.idx2] + g2[:, th])).sum(axis=0)
    neg += (scale[:, None] * d1).sum(axis=0)
    if ws.idx_ex.size:
        h0 = np.maximum(ws.ev_psi @ state.theta, H0_FLOOR)
        pos += (ws.ev_psi / h0[:, None]).sum(axis=0)
    pen = (ws.R_theta @ state.theta) / var.sigma_theta2
    neg += np.maximum(pen, 0.0)
    pos += np.maximum(-pen, 0.0)
    return pos, neg


def mi_denominators(spec, state, var, ds, upsilon: float = UPSILON) -> np.ndarray:
    """Denominators of the multiplicative-iterative theta update.

    ``d_u`` is the sum of the negative terms of the theta gradient plus
    ``upsilon``; see :func:`mi_parts`.
    """
    _, neg = mi_parts(workspace(spec, ds), state, var)
    return neg + upsilon


def negative_part_denominators(g, upsilon: float = UPSILON) -> np.ndarray:
    """``[g]^- + upsilon`` applied entrywise to a plain gradient vector."""
    g = np.asarray(g, dtype=float)
    return np.maximum(-g, 0.0) + upsilon


def score(spec, state, var, ds) -> ScoreBlocks:
    return derivatives(workspace(spec, ds), state, var, hessian=False)[0]


def negative_hessian(spec, state, var, ds) -> HessianAssembly:
    return derivatives(workspace(spec, ds), state, var, hessian=True)[1]


def _blocks(ws: Workspace):
    lay = ws.lay
    out = [("beta", lay.beta), ("gamma", lay.gamma), ("theta", lay.theta), ("alpha", lay.alpha)]
    out = [(k, np.arange(s.start, s.stop)) for k, s in out if s.stop > s.start]
    if lay.C:
        out.append(("kappa", lay.Z + np.arange(ws.n * lay.C)))
    return out


def _flat(ws, state):
    return np.concatenate([state.zeta(), state.kappa.ravel()])


def _unflat(ws, state, v):
    lay = ws.lay
    return replace(state.with_zeta(v[:lay.Z], lay), kappa=v[lay.Z:].reshape(ws.n, lay.C))


def gradient_check(ws: Workspace, state, var, step: float = 1e-5):
    """Compare analytic derivatives with central differences, block by block.

    Returns rows ``(kind, block, relative_error)``: score blocks against
    differences of the objective, Hessian row blocks against differences of
    the analytic score.  Relative errors use the Euclidean norm with the
    reference norm floored at 1e-6.
    """
    v0 = _flat(ws, state)
    sc, hess = derivatives(ws, state, var, hessian=True)
    g = np.concatenate([sc.zeta(), sc.g_kappa.ravel()])
    F = hess.dense()
    n_theta = ws.lay.theta
    rows = []
    fd_g = np.zeros_like(v0)
    fd_H = np.zeros((v0.size, v0.size))
    for j in range(v0.size):
        h = step * max(1.0, abs(v0[j]))
        if n_theta.start <= j < n_theta.stop:
            h = min(h, 0.5 * v0[j]) if v0[j] > 0 else h
        up, dn = v0.copy(), v0.copy()
        up[j] += h
        dn[j] -= h
        s_up, s_dn = _unflat(ws, state, up), _unflat(ws, state, dn)
        fd_g[j] = (ws.objective(s_up, var) - ws.objective(s_dn, var)) / (2 * h)
        g_up = derivatives(ws, s_up, var, hessian=False)[0]
        g_dn = derivatives(ws, s_dn, var, hessian=False)[0]
        fd_H[:, j] = -(np.concatenate([g_up.zeta(), g_up.g_kappa.ravel()])
                       - np.concatenate([g_dn.zeta(), g_dn.g_kappa.ravel()])) / (2 * h)
    for name, idx in _blocks(ws):
        ref = fd_g[idx]
        rows.append(("score", name, float(np.linalg.norm(g[idx] - ref) / max(np.linalg.norm(ref), 1e-6))))
    for name, idx in _blocks(ws):
        ref = fd_H[idx]
        rows.append(("hessian", name, float(np.linalg.norm(F[idx] - ref) / max(np.linalg.norm(ref), 1e-6))))
    return rows
