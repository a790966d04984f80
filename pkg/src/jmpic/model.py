"""Joint model: trajectories, hazards, survival and the penalised likelihood.

The hazard of subject ``i`` is ``h0(t) * exp(x_i' beta + z_i(t)' gamma)`` with
``h0 = sum_u theta_u psi_u`` and each longitudinal covariate modelled as
``z_ir(t) = phi_r(t; w_i)' alpha_r + xi_r(t)' kappa_ir``.

:class:`Workspace` precomputes every basis value the likelihood needs (at
quadrature nodes, event times and observation times) once per dataset, so the
objective and its derivatives reduce to batched array algebra.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .basis import (SEGMENT_NODES, BasisSet, default_knots, default_size, eval_basis,
                    penalty_matrix, reference_rule)
from .data import CensoringStatus, Dataset

EXACT, LEFT, RIGHT, INTERVAL = 0, 1, 2, 3
_KIND = {CensoringStatus.EXACT: EXACT, CensoringStatus.LEFT: LEFT,
         CensoringStatus.RIGHT: RIGHT, CensoringStatus.INTERVAL: INTERVAL}
H0_FLOOR = 1e-12


@dataclass(frozen=True)
class LongitudinalSpec:
    """Design of one longitudinal covariate.

    ``interactions`` holds ``(w_index, columns)`` pairs: each adds the
    listed time-basis columns multiplied by the subject's baseline covariate
    ``w[w_index]``.
    """

    name: str
    time_basis: BasisSet
    random_basis: BasisSet
    interactions: tuple = ()
    penalize: bool = True

    def __post_init__(self):
        object.__setattr__(self, "interactions",
                           tuple((int(j), tuple(int(c) for c in cols)) for j, cols in self.interactions))

    @property
    def fixed_size(self) -> int:
        return self.time_basis.size + sum(len(cols) for _, cols in self.interactions)

    @property
    def random_size(self) -> int:
        return self.random_basis.size

    def fixed_design(self, t, w) -> np.ndarray:
        """Rows of the fixed design at times ``t`` for baseline covariates ``w``.

        ``w`` is a vector (one subject) or an array whose leading axes match
        those of ``t``.
        """
        phi = eval_basis(self.time_basis, t)
        if not self.interactions:
            return phi
        w = np.asarray(w, dtype=float)
        blocks = [phi]
        for j, cols in self.interactions:
            wj = w[..., j]
            wj = np.reshape(wj, np.shape(wj) + (1,) * (phi.ndim - np.ndim(wj)))
            blocks.append(phi[..., list(cols)] * wj)
        return np.concatenate(blocks, axis=-1)

    def random_design(self, t) -> np.ndarray:
        return eval_basis(self.random_basis, t)

    def penalty(self) -> np.ndarray:
        b = self.fixed_size
        out = np.zeros((b, b))
        if self.penalize:
            k = self.time_basis.size
            out[:k, :k] = penalty_matrix(self.time_basis).entries
        return out

    def to_dict(self) -> dict:
        return {"name": self.name, "time_basis": self.time_basis.to_dict(),
                "random_basis": self.random_basis.to_dict(),
                "interactions": [[j, list(c)] for j, c in self.interactions],
                "penalize": self.penalize}

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], BasisSet.from_dict(d["time_basis"]), BasisSet.from_dict(d["random_basis"]),
                   tuple((j, tuple(c)) for j, c in d.get("interactions", [])), bool(d.get("penalize", True)))


@dataclass(frozen=True)
class ModelSpec:
    baseline: BasisSet
    longitudinal: tuple = ()
    p: int = 0
    survival: bool = True

    def __post_init__(self):
        object.__setattr__(self, "longitudinal", tuple(self.longitudinal))

    @property
    def q(self) -> int:
        return len(self.longitudinal)

    @property
    def m(self) -> int:
        return self.baseline.size

    @property
    def fixed_sizes(self) -> list:
        return [ls.fixed_size for ls in self.longitudinal]

    @property
    def random_sizes(self) -> list:
        return [ls.random_size for ls in self.longitudinal]

    def layout(self, n: int) -> "Layout":
        return Layout(self, n)

    def baseline_penalty(self) -> np.ndarray:
        return penalty_matrix(self.baseline).entries

    def to_dict(self) -> dict:
        return {"baseline": self.baseline.to_dict(), "p": self.p, "survival": self.survival,
                "longitudinal": [ls.to_dict() for ls in self.longitudinal]}

    @classmethod
    def from_dict(cls, d):
        return cls(BasisSet.from_dict(d["baseline"]),
                   tuple(LongitudinalSpec.from_dict(e) for e in d.get("longitudinal", [])),
                   int(d.get("p", 0)), bool(d.get("survival", True)))

    def digest(self) -> str:
        import hashlib
        import json

        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


class Layout:
    """Index bookkeeping for ``zeta = (beta, gamma, theta, alpha)`` and ``kappa``.

    In the no-survival mode the beta, gamma and theta blocks are empty.
    """

    def __init__(self, spec: ModelSpec, n: int):
        s = spec.survival
        self.n = n
        self.p = spec.p if s else 0
        self.q = spec.q if s else 0
        self.m = spec.m if s else 0
        self.b = spec.fixed_sizes
        self.c = spec.random_sizes
        self.B = int(sum(self.b))
        self.C = int(sum(self.c))
        o = 0
        self.beta = slice(o, o + self.p); o += self.p
        self.gamma = slice(o, o + self.q); o += self.q
        self.theta = slice(o, o + self.m); o += self.m
        self.alpha = slice(o, o + self.B)
        self.alpha_r = []
        for br in self.b:
            self.alpha_r.append(slice(o, o + br))
            o += br
        self.Z = o
        self.kappa_r = []
        k = 0
        for cr in self.c:
            self.kappa_r.append(slice(k, k + cr))
            k += cr
        # local per-subject vector: zeta followed by that subject's kappa
        self.d = self.Z + self.C

    def alpha_local(self, r):
        s = self.alpha_r[r]
        return slice(s.start - self.alpha.start, s.stop - self.alpha.start)

    def names(self, spec: ModelSpec, ds: Dataset | None = None) -> list:
        out = []
        xn = ds.x_names if ds is not None else [f"x{j + 1}" for j in range(spec.p)]
        if spec.survival:
            out += [f"beta[{nm}]" for nm in xn]
            out += [f"gamma[{ls.name}]" for ls in spec.longitudinal]
            out += [f"theta[{u}]" for u in range(spec.m)]
        for ls in spec.longitudinal:
            out += [f"alpha[{ls.name}][{k}]" for k in range(ls.fixed_size)]
        return out


@dataclass(frozen=True)
class ParameterState:
    beta: np.ndarray
    gamma: np.ndarray
    theta: np.ndarray
    alpha: np.ndarray
    kappa: np.ndarray

    def __post_init__(self):
        for name in ("beta", "gamma", "theta", "alpha", "kappa"):
            object.__setattr__(self, name, np.array(getattr(self, name), dtype=float))
        if self.kappa.ndim != 2:
            raise ValueError("kappa must be an n x C array")

    @classmethod
    def zeros(cls, spec: ModelSpec, n: int) -> "ParameterState":
        lay = Layout(spec, n)
        return cls(np.zeros(lay.p), np.zeros(lay.q), np.zeros(lay.m), np.zeros(lay.B), np.zeros((n, lay.C)))

    def zeta(self) -> np.ndarray:
        return np.concatenate([self.beta, self.gamma, self.theta, self.alpha])

    def eta(self) -> np.ndarray:
        return np.concatenate([self.zeta(), self.kappa.ravel()])

    def with_zeta(self, z, lay: Layout) -> "ParameterState":
        z = np.asarray(z, dtype=float)
        return ParameterState(z[lay.beta], z[lay.gamma], z[lay.theta], z[lay.alpha], self.kappa)

    def with_eta(self, e, lay: Layout) -> "ParameterState":
        e = np.asarray(e, dtype=float)
        st = self.with_zeta(e[: lay.Z], lay)
        return replace(st, kappa=e[lay.Z:].reshape(lay.n, lay.C))

    def max_abs_diff(self, other: "ParameterState") -> float:
        d = 0.0
        for a, b in ((self.beta, other.beta), (self.gamma, other.gamma), (self.theta, other.theta),
                     (self.alpha, other.alpha), (self.kappa, other.kappa)):
            if a.size:
                d = max(d, float(np.max(np.abs(a - b))))
        return d

    def to_dict(self) -> dict:
        return {k: np.asarray(getattr(self, k)).tolist() for k in ("beta", "gamma", "theta", "alpha", "kappa")}

    @classmethod
    def from_dict(cls, d, n=None, C=None):
        kap = np.asarray(d["kappa"], dtype=float)
        if kap.ndim != 2:
            kap = kap.reshape(n if n is not None else 0, C if C is not None else 0)
        return cls(d["beta"], d["gamma"], d["theta"], d["alpha"], kap)


@dataclass(frozen=True)
class VarianceComponents:
    """Variance components; smoothing parameters are derived as 1/(2 sigma^2).

    ``sigma_kappa2`` is laid out like one subject's kappa vector.
    """

    sigma_eps2: float
    sigma_theta2: float
    sigma_alpha2: tuple
    sigma_kappa2: tuple

    def __post_init__(self):
        object.__setattr__(self, "sigma_alpha2", tuple(float(v) for v in self.sigma_alpha2))
        object.__setattr__(self, "sigma_kappa2", tuple(float(v) for v in np.ravel(self.sigma_kappa2)))
        vals = [self.sigma_eps2, self.sigma_theta2, *self.sigma_alpha2, *self.sigma_kappa2]
        if not all(v > 0 and math.isfinite(v) for v in vals):
            raise ValueError("variance components must be finite and strictly positive")

    @property
    def lam_theta(self) -> float:
        return 0.5 / self.sigma_theta2

    @property
    def lam_alpha(self) -> tuple:
        return tuple(0.5 / v for v in self.sigma_alpha2)

    def as_vector(self) -> np.ndarray:
        return np.array([self.sigma_eps2, self.sigma_theta2, *self.sigma_alpha2, *self.sigma_kappa2])

    def to_dict(self) -> dict:
        return {"sigma_eps2": self.sigma_eps2, "sigma_theta2": self.sigma_theta2,
                "sigma_alpha2": list(self.sigma_alpha2), "sigma_kappa2": list(self.sigma_kappa2)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["sigma_eps2"], d["sigma_theta2"], d["sigma_alpha2"], d["sigma_kappa2"])


def build_spec(ds: Dataset, *, baseline_m=None, baseline_order=4, baseline_knots=None,
               baseline_family="mspline", longitudinal=None, survival=True) -> ModelSpec:
    """Assemble a :class:`ModelSpec` with data-driven defaults.

    ``longitudinal`` is a list with one dict per covariate with keys
    ``time_basis`` (a :class:`BasisSet` or a dict with ``family``/``degree``/
    ``order``/``interior``), ``random_basis`` (same) and ``interactions``.
    Missing entries default to a cubic polynomial mean and a random intercept
    and slope.  Spline mean trajectories are penalised by default; parametric
    (polynomial) ones are not.
    """
    T = ds.max_time()
    ends = ds.endpoint_times()
    if baseline_knots is not None:
        baseline = BasisSet(baseline_family, tuple(baseline_knots), baseline_order)
    elif baseline_family == "indicator":
        baseline = BasisSet("indicator", (0.0, T))
    else:
        m = baseline_m if baseline_m is not None else default_size(ds.n0, baseline_order)
        pool = ends if ends.size else np.array([T])
        baseline = default_knots(np.concatenate([pool, [T]]), m, baseline_order, baseline_family, lower=0.0)
    longs = []
    cfg = longitudinal if longitudinal is not None else [{} for _ in range(ds.q)]
    for r, entry in enumerate(cfg):
        name = entry.get("name", ds.z_names[r] if r < len(ds.z_names) else f"z{r + 1}")
        tb = _basis_from_config(entry.get("time_basis", {"family": "polynomial", "degree": 3}), T)
        rb = _basis_from_config(entry.get("random_basis", {"family": "polynomial", "degree": 1}), T)
        inter = []
        for it in entry.get("interactions", []):
            j = it["covariate"]
            if isinstance(j, str):
                j = list(ds.w_names).index(j)
            cols = it.get("columns", list(range(tb.size)))
            inter.append((int(j), tuple(cols)))
        smooth = tb.family in ("bspline", "mspline")
        longs.append(LongitudinalSpec(name, tb, rb, tuple(inter), bool(entry.get("penalize", smooth))))
    return ModelSpec(baseline, tuple(longs), ds.p, survival)


def _basis_from_config(cfg, T):
    if isinstance(cfg, BasisSet):
        return cfg
    fam = cfg.get("family", "polynomial")
    if fam == "polynomial":
        return BasisSet("polynomial", (0.0, T), int(cfg.get("degree", 1)))
    if fam in ("bspline", "mspline"):
        order = int(cfg.get("order", 4))
        if cfg.get("knots") is not None:
            return BasisSet(fam, tuple(cfg["knots"]), order)
        interior = list(cfg.get("interior", []))
        upper = max(T, interior[-1] + 1e-9) if interior else T
        return BasisSet(fam, tuple([0.0] + interior + [upper]), order)
    if fam == "indicator":
        return BasisSet("indicator", tuple(cfg.get("knots", (0.0, T))))
    raise ValueError(f"unknown basis family {fam!r}")


class Workspace:
    """Basis values at quadrature nodes, event times and observation times.

    Region 1 integrates the hazard over ``[0, a_i]`` where ``a_i`` is the
    event time (exact), the censoring time (right) or the left endpoint
    (interval; empty for left censoring).  Region 2 covers ``[t_left,
    t_right]`` for left- and interval-censored subjects only, so narrow
    intervals are integrated directly rather than by differencing.
    """

    def __init__(self, spec: ModelSpec, ds: Dataset, nodes: int = SEGMENT_NODES):
        if spec.p != ds.p and spec.survival:
            raise ValueError(f"model expects p={spec.p} covariates, data has {ds.p}")
        if spec.q != ds.q:
            raise ValueError(f"model expects q={spec.q} longitudinal covariates, data has {ds.q}")
        self.spec = spec
        self.ds = ds
        self.n = ds.n
        self.lay = Layout(spec, ds.n)
        lay = self.lay
        subs = ds.subjects
        self.W = np.array([s.long_fixed for s in subs], dtype=float).reshape(self.n, ds.pz)
        self.X = np.array([s.x for s in subs], dtype=float).reshape(self.n, ds.p)
        self.kind = np.array([_KIND[s.status] for s in subs], dtype=int)
        self.t_left = np.array([s.t_left for s in subs], dtype=float)
        self.t_right = np.array([s.t_right for s in subs], dtype=float)
        self.R_theta = spec.baseline_penalty() if spec.survival else np.zeros((0, 0))
        self.R_alpha = [ls.penalty() for ls in spec.longitudinal]
        self.rank_theta = _rank(self.R_theta)
        self.rank_alpha = [_rank(R) for R in self.R_alpha]
        self._build_longitudinal()
        if spec.survival:
            self._build_survival(nodes)

    # construction -----------------------------------------------------------------

    def _build_longitudinal(self):
        spec, ds, lay = self.spec, self.ds, self.lay
        subj, times, vals = [], [], []
        for i, s in enumerate(ds.subjects):
            for rec in s.longitudinal:
                subj.append(i)
                times.append(rec.time)
                vals.append(rec.values)
        self.obs_subject = np.asarray(subj, dtype=int)
        self.obs_time = np.asarray(times, dtype=float)
        self.obs_values = np.asarray(vals, dtype=float).reshape(len(subj), ds.q)
        self.N = len(subj)
        n = self.n
        self.obs_phi, self.obs_xi = [], []
        self.gram_aa, self.gram_ak, self.gram_kk = [], [], []
        for r, ls in enumerate(spec.longitudinal):
            phi = ls.fixed_design(self.obs_time, self.W[self.obs_subject]) if self.N else np.zeros((0, ls.fixed_size))
            xi = ls.random_design(self.obs_time) if self.N else np.zeros((0, ls.random_size))
            self.obs_phi.append(phi)
            self.obs_xi.append(xi)
            self.gram_aa.append(phi.T @ phi)
            gak = np.zeros((n, ls.fixed_size, ls.random_size))
            gkk = np.zeros((n, ls.random_size, ls.random_size))
            np.add.at(gak, self.obs_subject, phi[:, :, None] * xi[:, None, :])
            np.add.at(gkk, self.obs_subject, xi[:, :, None] * xi[:, None, :])
            self.gram_ak.append(gak)
            self.gram_kk.append(gkk)

    def _split_points(self):
        spec = self.spec
        pts = [spec.baseline.breakpoints]
        for ls in spec.longitudinal:
            for b in (ls.time_basis, ls.random_basis):
                if b.family in ("bspline", "mspline", "indicator"):
                    pts.append(b.breakpoints)
        finite = np.concatenate([self.t_left, self.t_right[np.isfinite(self.t_right)]])
        pts.append([0.0, float(finite.max()) if finite.size else 0.0])
        bp = np.unique(np.concatenate([np.asarray(p, dtype=float) for p in pts]))
        return bp[bp >= 0.0]

    def _region(self, sub, lo, hi, x, w):
        bp = self.breaks
        a = np.clip(bp[None, :-1], lo[:, None], hi[:, None])
        b = np.clip(bp[None, 1:], lo[:, None], hi[:, None])
        half = 0.5 * (b - a)
        nodes = (a[:, :, None] + half[:, :, None] * (x[None, None, :] + 1.0)).reshape(len(sub), -1)
        weights = (half[:, :, None] * w[None, None, :]).reshape(len(sub), -1)
        keep = np.any(weights > 0, axis=0)
        nodes, weights = nodes[:, keep], weights[:, keep]
        reg = {"sub": sub, "nodes": nodes, "w": weights}
        reg["psi"] = eval_basis(self.spec.baseline, nodes)
        Wn = self.W[sub][:, None, :]
        reg["phi"] = [ls.fixed_design(nodes, np.broadcast_to(Wn, nodes.shape + (self.W.shape[1],)))
                      for ls in self.spec.longitudinal]
        reg["xi"] = [ls.random_design(nodes) for ls in self.spec.longitudinal]
        return reg

    def _build_survival(self, nodes):
        x, w = reference_rule(nodes)
        self.breaks = self._split_points()
        kind = self.kind
        upper1 = np.where(kind == LEFT, 0.0, self.t_left)
        all_sub = np.arange(self.n)
        self.reg1 = self._region(all_sub, np.zeros(self.n), upper1, x, w)
        idx2 = np.flatnonzero((kind == LEFT) | (kind == INTERVAL))
        self.idx2 = idx2
        self.reg2 = self._region(idx2, self.t_left[idx2], self.t_right[idx2], x, w) if idx2.size else None
        idx_ex = np.flatnonzero(kind == EXACT)
        self.idx_ex = idx_ex
        te = self.t_left[idx_ex]
        self.ev_psi = eval_basis(self.spec.baseline, te)
        self.ev_phi = [ls.fixed_design(te, self.W[idx_ex]) for ls in self.spec.longitudinal]
        self.ev_xi = [ls.random_design(te) for ls in self.spec.longitudinal]
        self._build_local_index()

    def _build_local_index(self):
        lay = self.lay
        # non-theta coordinates of the local vector, in the order used by J
        self.nt_index = np.concatenate([np.arange(lay.beta.start, lay.beta.stop),
                                        np.arange(lay.gamma.start, lay.gamma.stop),
                                        np.arange(lay.alpha.start, lay.alpha.stop),
                                        lay.Z + np.arange(lay.C)]).astype(int)
        self.th_index = np.arange(lay.theta.start, lay.theta.stop)
        # positions inside J
        p, q, B = lay.p, lay.q, lay.B
        self.j_gamma = p
        self.j_alpha = [p + q + (s.start - lay.alpha.start) for s in lay.alpha_r]
        self.j_kappa = [p + q + B + s.start for s in lay.kappa_r]

    # trajectory pieces ------------------------------------------------------------

    def _traj(self, reg, state):
        """Modelled covariate values at a region's nodes, one array per r."""
        out = []
        kap = state.kappa[reg["sub"]]
        for r in range(self.spec.q):
            ar = state.alpha[self.lay.alpha_local(r)]
            kr = kap[:, self.lay.kappa_r[r]]
            out.append(reg["phi"][r] @ ar + np.einsum("nkc,nc->nk", reg["xi"][r], kr))
        return out

    def _event_traj(self, state):
        out = []
        kap = state.kappa[self.idx_ex]
        for r in range(self.spec.q):
            ar = state.alpha[self.lay.alpha_local(r)]
            kr = kap[:, self.lay.kappa_r[r]]
            out.append(self.ev_phi[r] @ ar + np.sum(self.ev_xi[r] * kr, axis=1))
        return out

    def _exponent(self, reg, state, z):
        E = (self.X[reg["sub"]] @ state.beta)[:, None] + np.zeros_like(reg["w"])
        for r in range(self.spec.q):
            E = E + state.gamma[r] * z[r]
        return E

    def _J(self, reg, state, z, sub=None):
        """Derivatives of the exponent in the non-theta coordinates at each node."""
        lay = self.lay
        parts = [np.broadcast_to(self.X[reg["sub"]][:, None, :], reg["w"].shape + (lay.p,))]
        parts.append(np.stack(z, axis=-1) if z else np.zeros(reg["w"].shape + (0,)))
        parts += [state.gamma[r] * reg["phi"][r] for r in range(self.spec.q)]
        parts += [state.gamma[r] * reg["xi"][r] for r in range(self.spec.q)]
        return np.concatenate(parts, axis=-1)

    # values -----------------------------------------------------------------------

    def region_integral(self, reg, state):
        z = self._traj(reg, state)
        E = self._exponent(reg, state, z)
        h0 = reg["psi"] @ state.theta
        return np.sum(reg["w"] * h0 * np.exp(E), axis=1)

    def survival_terms(self, state):
        """Per-subject survival log-likelihood contributions."""
        n = self.n
        I1 = self.region_integral(self.reg1, state)
        ll = -I1
        if self.idx_ex.size:
            h0 = self.ev_psi @ state.theta
            z = self._event_traj(state)
            E = self.X[self.idx_ex] @ state.beta
            for r in range(self.spec.q):
                E = E + state.gamma[r] * z[r]
            with np.errstate(divide="ignore"):
                ll[self.idx_ex] += np.where(h0 > 0, np.log(np.where(h0 > 0, h0, 1.0)), -np.inf) + E
        if self.idx2.size:
            I2 = self.region_integral(self.reg2, state)
            with np.errstate(divide="ignore", invalid="ignore"):
                term = np.where(I2 > 0, np.log(-np.expm1(-np.where(I2 > 0, I2, 1.0))), -np.inf)
            ll[self.idx2] += term
        return ll

    def longitudinal_residuals(self, state):
        res = np.empty((self.N, self.spec.q))
        for r in range(self.spec.q):
            ar = state.alpha[self.lay.alpha_local(r)]
            kr = state.kappa[self.obs_subject][:, self.lay.kappa_r[r]]
            res[:, r] = self.obs_values[:, r] - self.obs_phi[r] @ ar - np.sum(self.obs_xi[r] * kr, axis=1)
        return res

    def loglik(self, state, var):
        ll = float(np.sum(self.survival_terms(state))) if self.spec.survival else 0.0
        return ll + self._gaussian_terms(state, var)

    def _gaussian_terms(self, state, var):
        res = self.longitudinal_residuals(state)
        out = -0.5 * float(np.sum(res * res)) / var.sigma_eps2
        out -= 0.5 * res.size * math.log(var.sigma_eps2)
        sk = np.asarray(var.sigma_kappa2)
        if sk.size:
            out -= 0.5 * self.n * float(np.sum(np.log(sk)))
            out -= 0.5 * float(np.sum(state.kappa ** 2 / sk[None, :]))
        return out

    def penalty(self, state, var):
        pen = 0.0
        if self.spec.survival and state.theta.size:
            pen += var.lam_theta * float(state.theta @ self.R_theta @ state.theta)
        for r in range(self.spec.q):
            ar = state.alpha[self.lay.alpha_local(r)]
            pen += var.lam_alpha[r] * float(ar @ self.R_alpha[r] @ ar)
        return pen

    def objective(self, state, var):
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            val = self.loglik(state, var) - self.penalty(state, var)
        return val if np.isfinite(val) else -np.inf

    def check_state(self, state):
        lay = self.lay
        shapes = {"beta": lay.p, "gamma": lay.q, "theta": lay.m, "alpha": lay.B}
        for k, v in shapes.items():
            if getattr(state, k).shape != (v,):
                raise ValueError(f"{k} has shape {getattr(state, k).shape}, expected ({v},)")
        if state.kappa.shape != (lay.n, lay.C):
            raise ValueError(f"kappa has shape {state.kappa.shape}, expected ({lay.n}, {lay.C})")
        if np.any(state.theta < 0):
            raise ValueError("theta must be non-negative")


def _rank(R):
    if R.size == 0:
        return 0
    w = np.linalg.eigvalsh(R)
    if w.max() <= 0:
        return 0
    return int(np.sum(w > 1e-9 * w.max()))


def workspace(spec: ModelSpec, ds: Dataset) -> Workspace:
    """Workspace for ``(spec, ds)``, cached on the dataset."""
    key = ("ws", spec)
    ws = ds._cache.get(key)
    if ws is None:
        ws = Workspace(spec, ds)
        ds._cache[key] = ws
    return ws


# single-subject evaluators ----------------------------------------------------------

def _subject_w(ds, i, spec):
    if ds is None:
        if any(ls.interactions for ls in spec.longitudinal) or (spec.p and spec.survival):
            raise ValueError("this model needs the dataset to look up subject covariates")
        return np.zeros(0), np.zeros(0)
    s = ds.subjects[i]
    return np.asarray(s.x, dtype=float), np.asarray(s.long_fixed, dtype=float)


def trajectory(spec: ModelSpec, state: ParameterState, subject_index: int, r: int, t, ds: Dataset | None = None):
    """Noise-free value of longitudinal covariate ``r`` for one subject."""
    n = state.kappa.shape[0]
    if not (0 <= subject_index < n) or not (0 <= r < spec.q):
        raise IndexError("subject or covariate index out of range")
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("t must be non-negative")
    lay = Layout(spec, n)
    ls = spec.longitudinal[r]
    if ds is not None:
        w = np.asarray(ds.subjects[subject_index].long_fixed, dtype=float)
    elif ls.interactions:
        raise ValueError("this trajectory needs the dataset to look up subject covariates")
    else:
        w = np.zeros(0)
    phi = ls.fixed_design(t, w)
    xi = ls.random_design(t)
    val = phi @ state.alpha[lay.alpha_local(r)] + xi @ state.kappa[subject_index, lay.kappa_r[r]]
    return float(val) if np.ndim(val) == 0 else val


def _log_relative(spec, state, x, w, kappa_row, t):
    """Linear predictor ``x'beta + z(t)'gamma`` for arbitrary covariates."""
    lay = Layout(spec, 1)
    t = np.asarray(t, dtype=float)
    eta = np.full(t.shape, float(np.dot(x, state.beta)) if state.beta.size else 0.0)
    for r, ls in enumerate(spec.longitudinal):
        z = ls.fixed_design(t, w) @ state.alpha[lay.alpha_local(r)] + ls.random_design(t) @ kappa_row[lay.kappa_r[r]]
        eta = eta + state.gamma[r] * z
    return eta


def hazard(spec: ModelSpec, state: ParameterState, subject_index: int, t, ds: Dataset | None = None):
    x, w = _subject_w(ds, subject_index, spec)
    t = np.asarray(t, dtype=float)
    h0 = eval_basis(spec.baseline, t) @ state.theta
    val = h0 * np.exp(_log_relative(spec, state, x, w, state.kappa[subject_index], t))
    return float(val) if np.ndim(val) == 0 else val


def cumulative_hazard_curve(spec, state, x, w, kappa_row, t, log_relative=None):
    """Cumulative hazard at times ``t`` for given covariates.

    ``log_relative`` optionally replaces the trajectory part with a callable
    returning ``z(s)' gamma`` at an array of times.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t < 0):
        raise ValueError("t must be non-negative")
    xq, wq = reference_rule(SEGMENT_NODES)
    pts = [spec.baseline.breakpoints]
    for ls in spec.longitudinal:
        for b in (ls.time_basis, ls.random_basis):
            if b.family != "polynomial":
                pts.append(b.breakpoints)
    bp = np.unique(np.concatenate(pts + [[0.0, float(t.max())]]))
    lo = np.clip(bp[None, :-1], 0.0, t[:, None])
    hi = np.clip(bp[None, 1:], 0.0, t[:, None])
    half = 0.5 * (hi - lo)
    nodes = lo[:, :, None] + half[:, :, None] * (xq + 1.0)
    wts = half[:, :, None] * wq
    h0 = eval_basis(spec.baseline, nodes) @ state.theta
    if log_relative is None:
        rel = _log_relative(spec, state, x, w, kappa_row, nodes)
    else:
        xb = float(np.dot(x, state.beta)) if state.beta.size else 0.0
        rel = xb + np.asarray(log_relative(nodes.ravel()), dtype=float).reshape(nodes.shape)
    return np.sum(wts * h0 * np.exp(rel), axis=(1, 2))


def cumulative_hazard(spec: ModelSpec, state: ParameterState, subject_index: int, t, ds: Dataset | None = None):
    x, w = _subject_w(ds, subject_index, spec)
    scalar = np.ndim(t) == 0
    val = cumulative_hazard_curve(spec, state, x, w, state.kappa[subject_index], t)
    return float(val[0]) if scalar else val


def survival(spec: ModelSpec, state: ParameterState, subject_index: int, t, ds: Dataset | None = None):
    H = cumulative_hazard(spec, state, subject_index, t, ds)
    return math.exp(-H) if np.ndim(H) == 0 else np.exp(-H)


def log_likelihood(spec: ModelSpec, state: ParameterState, var: VarianceComponents, ds: Dataset) -> float:
    return workspace(spec, ds).loglik(state, var)


def penalised_objective(spec: ModelSpec, state: ParameterState, var: VarianceComponents, ds: Dataset) -> float:
    return workspace(spec, ds).objective(state, var)
