"""Basis functions, their integrals, roughness penalties and quadrature.

Every family is stored as a piecewise polynomial in local coordinates
``x = t - left_breakpoint`` so that values, derivatives and integrals are
exact polynomial operations.  Spline pieces are built by the Cox-de Boor
recursion carried out on polynomial coefficients.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

FAMILIES = ("mspline", "bspline", "polynomial", "indicator")

# nodes per inter-knot segment used by the likelihood integrals
SEGMENT_NODES = 15


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class BasisSet:
    """A family of basis functions on ``[knots[0], knots[-1]]``.

    For splines ``order`` is the polynomial order (degree + 1) and ``knots``
    the distinct breakpoints including both boundaries.  For the polynomial
    family ``order`` is the degree and ``knots`` give the range over which the
    roughness penalty is integrated.  Indicator functions are one on
    ``[knots[j], knots[j+1])`` with the last interval closed.
    """

    family: str
    knots: tuple
    order: int = 4
    jittered: bool = False
    _pp: object = field(default=None, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown basis family {self.family!r}")
        knots = tuple(float(k) for k in self.knots)
        object.__setattr__(self, "knots", knots)
        if len(knots) < 2 or np.any(np.diff(knots) <= 0):
            raise ValueError("knots must be strictly ascending with at least two entries")
        if self.family in ("mspline", "bspline") and self.order < 1:
            raise ValueError("spline order must be >= 1")
        if self.family == "polynomial" and self.order < 0:
            raise ValueError("polynomial degree must be >= 0")
        object.__setattr__(self, "_pp", _build_pieces(self.family, knots, int(self.order)))

    @property
    def size(self) -> int:
        return self._pp.coefs.shape[1]

    @property
    def lower(self) -> float:
        return self.knots[0]

    @property
    def upper(self) -> float:
        return self.knots[-1]

    @property
    def breakpoints(self) -> np.ndarray:
        return np.asarray(self.knots)

    def to_dict(self) -> dict:
        return {"family": self.family, "order": int(self.order), "knots": list(self.knots)}

    @classmethod
    def from_dict(cls, d: dict) -> "BasisSet":
        return cls(d["family"], tuple(d["knots"]), int(d.get("order", 4)))


@dataclass(frozen=True)
class PenaltyMatrix:
    entries: np.ndarray
    degenerate: bool = False

    @property
    def rank(self) -> int:
        w = np.linalg.eigvalsh(self.entries) if self.entries.size else np.zeros(0)
        if w.size == 0 or w.max() <= 0:
            return 0
        return int(np.sum(w > 1e-9 * w.max()))


@dataclass(frozen=True)
class QuadratureRule:
    nodes: np.ndarray
    weights: np.ndarray

    def integrate(self, f) -> float:
        return float(np.dot(self.weights, f(self.nodes)))


class _Pieces:
    """Piecewise polynomials: ``coefs[j, u, p]`` multiplies ``(t - bp[j])**p``."""

    def __init__(self, bp, coefs, extrapolate):
        self.bp = np.asarray(bp, dtype=float)
        self.coefs = np.asarray(coefs, dtype=float)
        self.extrapolate = extrapolate
        L, _, k = self.coefs.shape
        # integral of each piece over its full interval, then running totals
        widths = np.diff(self.bp)
        powers = widths[:, None] ** np.arange(1, k + 1)[None, :]
        full = np.einsum("jup,jp->ju", self.coefs / np.arange(1, k + 1), powers)
        self.cumulative = np.vstack([np.zeros((1, full.shape[1])), np.cumsum(full, axis=0)])

    def locate(self, t):
        j = np.searchsorted(self.bp, t, side="right") - 1
        return np.clip(j, 0, len(self.bp) - 2)

    def derivative_coefs(self, nu):
        c = self.coefs
        for _ in range(nu):
            k = c.shape[2]
            if k == 1:
                return np.zeros_like(c)
            c = c[:, :, 1:] * np.arange(1, k)[None, None, :]
        return c

    def evaluate(self, t, nu=0):
        t = np.asarray(t, dtype=float)
        j = self.locate(t)
        x = t - self.bp[j]
        c = self.derivative_coefs(nu)[j]
        out = c[..., -1].copy()
        for p in range(c.shape[-1] - 2, -1, -1):
            out = out * x[..., None] + c[..., p]
        if not self.extrapolate:
            outside = t > self.bp[-1]
            if np.any(outside):
                out[outside] = 0.0
        return out

    def integral(self, t):
        t = np.asarray(t, dtype=float)
        if self.extrapolate:
            j = self.locate(t)
            x = t - self.bp[j]
        else:
            tc = np.minimum(t, self.bp[-1])
            j = self.locate(tc)
            x = tc - self.bp[j]
        c = self.coefs[j] / np.arange(1, self.coefs.shape[2] + 1)
        out = c[..., -1].copy()
        for p in range(c.shape[-1] - 2, -1, -1):
            out = out * x[..., None] + c[..., p]
        return self.cumulative[j] + out * x[..., None]


def _polymul_linear(poly, const, slope):
    """Multiply a low-to-high coefficient array by ``const + slope*x``."""
    out = np.zeros(len(poly) + 1)
    out[:-1] += const * poly
    out[1:] += slope * poly
    return out


def _bspline_pieces(bp, k):
    interior = list(bp[1:-1])
    T = np.array([bp[0]] * k + interior + [bp[-1]] * k)
    L = len(bp) - 1
    size = L + k - 1
    coefs = np.zeros((L, size, k))
    for J in range(L):
        left = bp[J]
        mu = J + k - 1
        # polys[i] holds B_{i,r} restricted to this interval
        polys = {mu: np.array([1.0])}
        for r in range(2, k + 1):
            new = {}
            for i in range(mu - r + 1, mu + 1):
                acc = np.zeros(r)
                d1 = T[i + r - 1] - T[i]
                if d1 > 0 and i in polys:
                    acc += _polymul_linear(polys[i], (left - T[i]) / d1, 1.0 / d1)[:r]
                d2 = T[i + r] - T[i + 1]
                if d2 > 0 and (i + 1) in polys:
                    acc += _polymul_linear(polys[i + 1], (T[i + r] - left) / d2, -1.0 / d2)[:r]
                new[i] = acc
            polys = new
        for i, poly in polys.items():
            coefs[J, i, : len(poly)] = poly
    return T, coefs


@lru_cache(maxsize=256)
def _build_pieces(family, knots, order):
    bp = np.asarray(knots, dtype=float)
    if family == "indicator":
        L = len(bp) - 1
        coefs = np.zeros((L, L, 1))
        coefs[np.arange(L), np.arange(L), 0] = 1.0
        return _Pieces(bp, coefs, extrapolate=False)
    if family == "polynomial":
        # one piece anchored at zero so coefficients are plain powers of t
        deg = order
        coefs = np.zeros((1, deg + 1, deg + 1))
        shift = bp[0]
        # expand t**u = (x + shift)**u by the binomial theorem
        from math import comb

        for u in range(deg + 1):
            for p in range(u + 1):
                coefs[0, u, p] = comb(u, p) * shift ** (u - p)
        return _Pieces(bp[[0, -1]], coefs, extrapolate=True)
    T, coefs = _bspline_pieces(bp, order)
    if family == "mspline":
        span = T[order:] - T[:-order]
        coefs = coefs * (order / span)[None, :, None]
        return _Pieces(bp, coefs, extrapolate=False)
    return _Pieces(bp, coefs, extrapolate=True)


def _check_domain(basis, t):
    t = np.asarray(t, dtype=float)
    if not np.all(np.isfinite(t)):
        raise DomainError("basis evaluated at a non-finite time")
    if np.any(t < basis.lower - 1e-12 * max(1.0, abs(basis.lower))):
        raise DomainError(f"time below the first boundary knot {basis.lower}")
    return np.maximum(t, basis.lower)


def eval_basis(basis: BasisSet, t, nu: int = 0) -> np.ndarray:
    """Basis values (or their ``nu``-th derivatives) at ``t``.

    Scalar ``t`` gives a vector of length ``basis.size``; an array of shape
    ``s`` gives shape ``s + (size,)``.
    """
    t = _check_domain(basis, t)
    return basis._pp.evaluate(t, nu)


def eval_basis_integral(basis: BasisSet, t) -> np.ndarray:
    """Integrals of each basis function from the lower boundary to ``t``."""
    t = _check_domain(basis, t)
    return basis._pp.integral(t)


def quadrature(a: float, b: float, n: int) -> QuadratureRule:
    """Gauss-Legendre rule with ``n`` nodes mapped to ``[a, b]``."""
    if not (a < b):
        raise DomainError("quadrature needs a < b")
    if n < 1:
        raise ValueError("quadrature needs at least one node")
    x, w = _legendre(int(n))
    half = 0.5 * (b - a)
    return QuadratureRule(a + half * (x + 1.0), half * w)


@lru_cache(maxsize=32)
def _legendre(n):
    x, w = np.polynomial.legendre.leggauss(n)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def reference_rule(n: int = SEGMENT_NODES):
    """Gauss-Legendre nodes and weights on ``[-1, 1]``."""
    return _legendre(n)


def penalty_matrix(basis: BasisSet) -> PenaltyMatrix:
    """Integrated products of second derivatives over the knot range."""
    m = basis.size
    pp = basis._pp
    if basis.family == "indicator" or (basis.family == "polynomial" and basis.order < 2) or (
        basis.family in ("mspline", "bspline") and basis.order < 3
    ):
        return PenaltyMatrix(np.zeros((m, m)), degenerate=True)
    k = pp.coefs.shape[2]
    x, w = _legendre(max(k, 2))
    bp = basis.breakpoints
    R = np.zeros((m, m))
    for a, b in zip(bp[:-1], bp[1:]):
        nodes = a + 0.5 * (b - a) * (x + 1.0)
        d2 = pp.evaluate(nodes, nu=2)
        R += d2.T @ (d2 * (0.5 * (b - a) * w)[:, None])
    R = 0.5 * (R + R.T)
    return PenaltyMatrix(R, degenerate=False)


def default_size(n0: int, order: int = 4) -> int:
    """Rule-of-thumb number of baseline functions: cube root of n0, clamped."""
    m = int(round(max(n0, 1) ** (1.0 / 3.0)))
    return int(min(max(m, order), 20))


def default_knots(times, m: int, order: int = 4, family: str = "mspline", lower: float | None = None) -> BasisSet:
    """Spline basis with ``m`` functions and interior knots at quantiles of ``times``.

    The boundary knots are ``min(times)`` (or ``lower`` when given) and
    ``max(times)``.  Coincident interior knots are separated by a tiny jitter
    and the returned basis is flagged.
    """
    t = np.asarray([v for v in np.ravel(np.asarray(times, dtype=float)) if np.isfinite(v)])
    if t.size == 0:
        raise ValueError("default_knots needs at least one finite time")
    if m < order:
        raise ValueError(f"need m >= order ({m} < {order})")
    lo = float(t.min()) if lower is None else float(lower)
    hi = float(t.max())
    if not hi > lo:
        raise ValueError("degenerate time range: all times equal")
    n_int = m - order
    probs = np.arange(1, n_int + 1) / (n_int + 1)
    interior = np.quantile(t, probs) if n_int else np.zeros(0)
    knots = np.concatenate([[lo], interior, [hi]])
    jittered = False
    eps = 64 * np.finfo(float).eps * max(1.0, hi - lo)
    for j in range(1, len(knots)):
        if knots[j] <= knots[j - 1]:
            knots[j] = knots[j - 1] + eps
            jittered = True
    if knots[-1] != hi and knots[-2] >= hi:
        raise ValueError("too many tied knots to separate")
    knots[-1] = max(knots[-1], hi)
    return BasisSet(family, tuple(knots), order, jittered=jittered)
