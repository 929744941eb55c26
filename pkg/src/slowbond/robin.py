"""Test functions with Robin data at the origin and the Robin heat semigroup.

Semigroup evaluation
--------------------
The solution of the heat equation on ``R \\ {0}`` with
``f'(0+) = f'(0-) = alpha (f(0+) - f(0-))`` splits into the heat flow of
the even part of the datum and an odd part that sees the interface. With
``G_t(v) = exp(-v^2 / 4t)`` and ``w = |u|``,

    T_t g(u) = E(u) + sign(u) O(w),
    E(u) = (4 pi t)^{-1/2} int G_t(u - y) g_even(y) dy,
    O(w) = (4 pi t)^{-1/2} int_0^inf g_odd(y) [G_t(w - y) + h(w + y)] dy,
    h(v) = G_t(v) [1 - 4 alpha sqrt(pi t) erfcx((v + 4 alpha t) / (2 sqrt t))].

``h`` is the inner ``z`` integral of the iterated representation done in
closed form. ``alpha -> 0`` gives the Neumann reflection and
``alpha -> inf`` the Dirichlet one. Values at ``u = 0`` are left limits
unless ``side="right"``.

Integrals use composite Gauss-Legendre on windows of half-width
``8 sqrt(2 t)`` split at the kernel peak and at the origin; every public
evaluation is repeated on a doubled mesh and the difference is the
reported error.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.polynomial import polynomial as P
from scipy.special import erfcx

from .io import write_csv

__all__ = [
    "Term",
    "TestFunction",
    "InfeasibleShapeError",
    "QuadratureError",
    "make_test_function",
    "robin_laplacian",
    "robin_gradient",
    "apply_semigroup",
    "semigroup_gradient",
    "semigroup_property_check",
    "robin_residual",
    "MacroProfile",
    "WeightedMeasure",
    "solve_macroscopic",
    "ou_variance",
    "write_function_csv",
    "write_variance_csv",
]


class InfeasibleShapeError(ValueError):
    """The requested jump and Robin conditions cannot be met by the shape."""


class QuadratureError(RuntimeError):
    """Mesh refinement changed a value by more than the tolerance."""

    def __init__(self, msg, achieved):
        super().__init__(f"{msg} (achieved error {achieved:.3e})")
        self.achieved = achieved


# ---------------------------------------------------------------------------
# Test functions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Term:
    """``p(u) exp(-a (u - c)^2)`` with ``p`` given by ascending coefficients."""

    coef: tuple
    a: float = 1.0
    c: float = 0.0

    def scaled(self, s: float) -> "Term":
        return Term(tuple(s * v for v in self.coef), self.a, self.c)


@functools.lru_cache(maxsize=4096)
def _deriv_poly(coef: tuple, a: float, c: float, k: int) -> np.ndarray:
    # d/du [p e^{-a(u-c)^2}] = (p' - 2a(u - c) p) e^{-a(u-c)^2}
    p = np.asarray(coef, dtype=float)
    lin = np.array([2 * a * c, -2 * a])
    for _ in range(k):
        p = P.polyadd(P.polyder(p) if p.size > 1 else np.zeros(1), P.polymul(lin, p))
    return p


def _terms_eval(terms, u, k):
    u = np.asarray(u, dtype=float)
    out = np.zeros_like(u)
    for tm in terms:
        p = _deriv_poly(tm.coef, tm.a, tm.c, k)
        out = out + P.polyval(u, p) * np.exp(-tm.a * (u - tm.c) ** 2)
    return out


@dataclass(frozen=True)
class TestFunction:
    """Piecewise function: sums of polynomial-times-Gaussian terms on each side.

    Continuous from the left at 0. ``alpha`` and ``order`` record the Robin
    conditions the function was built to satisfy: for every
    ``k <= (order - 1) // 2``

        f^(2k+1)(0+) = f^(2k+1)(0-) = alpha (f^(2k)(0+) - f^(2k)(0-)).
    """

    left: tuple
    right: tuple
    alpha: float
    order: int = 1

    # evaluation ----------------------------------------------------------
    def derivative(self, k: int, u, side: str = "left"):
        """k-th derivative; at ``u = 0`` the one-sided limit from ``side``."""
        u = np.asarray(u, dtype=float)
        right = (u > 0) | ((u == 0) & (side == "right"))
        out = np.where(right, _terms_eval(self.right, u, k), _terms_eval(self.left, u, k))
        return out if out.ndim else float(out)

    def __call__(self, u):
        return self.derivative(0, u, "left")

    def one_sided(self, k: int) -> tuple[float, float]:
        """``(f^(k)(0-), f^(k)(0+))``."""
        return (float(_terms_eval(self.left, 0.0, k)), float(_terms_eval(self.right, 0.0, k)))

    @property
    def jump(self) -> float:
        lo, hi = self.one_sided(0)
        return hi - lo

    def robin_residuals(self, kmax: int | None = None) -> np.ndarray:
        """Residuals of the Robin conditions for ``k = 0..kmax``."""
        kmax = (self.order - 1) // 2 if kmax is None else kmax
        res = []
        for k in range(kmax + 1):
            e_lo, e_hi = self.one_sided(2 * k)
            o_lo, o_hi = self.one_sided(2 * k + 1)
            target = self.alpha * (e_hi - e_lo)
            res.append(max(abs(o_hi - target), abs(o_lo - target)))
        return np.array(res)

    def even_odd(self, y):
        """``(g_even(y), g_odd(y))``."""
        a = self(y)
        b = self(-np.asarray(y, dtype=float))
        return 0.5 * (a + b), 0.5 * (a - b)

    # algebra -------------------------------------------------------------
    def __add__(self, other: "TestFunction") -> "TestFunction":
        if not isinstance(other, TestFunction):
            return NotImplemented
        if other.alpha != self.alpha:
            raise ValueError("cannot add test functions built for different alpha")
        return TestFunction(self.left + other.left, self.right + other.right, self.alpha,
                            min(self.order, other.order))

    def __mul__(self, s: float) -> "TestFunction":
        s = float(s)
        return TestFunction(tuple(t.scaled(s) for t in self.left),
                            tuple(t.scaled(s) for t in self.right), self.alpha, self.order)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-other)

    # size ----------------------------------------------------------------
    @property
    def extent(self) -> float:
        """Half-width outside which every term is below about 1e-16 relative."""
        ext = 0.0
        for tm in self.left + self.right:
            deg = max(len(tm.coef) - 1, 0)
            ext = max(ext, abs(tm.c) + math.sqrt((37.0 + deg * 4.0) / tm.a))
        return ext

    def decay_norm(self, k: int, ell: int, points: int = 20001) -> float:
        """``sup_{u != 0} (1 + |u|^ell) |f^(k)(u)|``: grid sup plus a tail bound.

        Beyond ``U`` (chosen so every term is monotone there and
        ``|u - c| >= |u| / 2``) each term is bounded by
        ``sum |p_j| U^j (1 + U^ell) exp(-a U^2 / 4)``, added over terms.
        """
        U = 1.0
        terms = self.left + self.right
        for tm in terms:
            deg = len(_deriv_poly(tm.coef, tm.a, tm.c, k)) - 1
            U = max(U, 2 * abs(tm.c) + 1, math.sqrt(2.0 * (deg + ell + 1) / tm.a) * 2)
        u = np.linspace(-U, U, points)
        u = u[u != 0]
        vals = (1 + np.abs(u) ** ell) * np.abs(self.derivative(k, u))
        return max(float(vals.max()), self.tail_bound(U, k, ell))

    def tail_bound(self, U: float, k: int = 0, ell: int = 0) -> float:
        """Bound on ``sup_{|u| >= U} (1 + |u|^ell) |f^(k)(u)|``.

        Valid once ``U >= 2 |c| + 1`` and ``U`` lies beyond the maximum of
        ``u^(deg + ell) exp(-a u^2 / 4)`` for every term.
        """
        tail = 0.0
        for tm in self.left + self.right:
            p = np.abs(_deriv_poly(tm.coef, tm.a, tm.c, k))
            tail += float(P.polyval(U, p)) * (1 + U ** ell) * math.exp(-tm.a * U * U / 4)
        return tail


def _zero_derivs(terms, K):
    return np.array([float(_terms_eval(terms, 0.0, k)) for k in range(K + 2)])


def make_test_function(J: float, alpha: float, K: int = 1, a: float = 1.0,
                       base_left=(1.0,), base_right=None, center_left: float = 0.0,
                       center_right: float | None = None,
                       correction_degree: int | None = None) -> TestFunction:
    """Build a member of the test space with jump ``J`` at the origin.

    The base shape is ``p_-(u) exp(-a (u - c_-)^2)`` on ``u <= 0`` and
    ``p_+(u) exp(-a (u - c_+)^2)`` on ``u > 0``. Corrections
    ``q_+-(u) exp(-a u^2)`` of degree ``correction_degree`` (default
    ``2 * ((K - 1) // 2) + 2``) are added on each side, with the
    minimum-norm coefficients that enforce the jump and the Robin
    conditions up to order ``2 k + 1`` for ``k <= (K - 1) // 2``.

    Parameters
    ----------
    J : float
        Jump ``f(0+) - f(0-)``.
    alpha : float
        Robin coefficient.
    K : int
        Highest derivative order for which the conditions must hold.

    Raises
    ------
    InfeasibleShapeError
        If the correction degree is too small for the constraint count.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    base_right = base_left if base_right is None else base_right
    center_right = center_left if center_right is None else center_right
    kmax = (K - 1) // 2
    D = 2 * kmax + 2 if correction_degree is None else int(correction_degree)
    left0 = (Term(tuple(map(float, base_left)), a, float(center_left)),)
    right0 = (Term(tuple(map(float, base_right)), a, float(center_right)),)
    top = 2 * kmax + 1
    bl = _zero_derivs(left0, top)
    br = _zero_derivs(right0, top)
    # derivative table of the correction basis u^j e^{-a u^2} at 0
    basis = np.array([_zero_derivs((Term(tuple([0.0] * j + [1.0]), a, 0.0),), top)
                      for j in range(D + 1)]).T  # (order, j)
    nunk = 2 * (D + 1)
    rows, rhs = [], []

    def side_row(k, which):
        r = np.zeros(nunk)
        if which == "L":
            r[:D + 1] = basis[k]
        else:
            r[D + 1:] = basis[k]
        return r

    rows.append(side_row(0, "R") - side_row(0, "L"))
    rhs.append(J - (br[0] - bl[0]))
    for k in range(kmax + 1):
        jump_row = side_row(2 * k, "R") - side_row(2 * k, "L")
        jump_base = br[2 * k] - bl[2 * k]
        for which, b0 in (("R", br), ("L", bl)):
            rows.append(side_row(2 * k + 1, which) - alpha * jump_row)
            rhs.append(-(b0[2 * k + 1] - alpha * jump_base))
    A = np.array(rows)
    b = np.array(rhs)
    coef, *_ = np.linalg.lstsq(A, b, rcond=None)
    resid = float(np.abs(A @ coef - b).max())
    scale = max(1.0, float(np.abs(b).max()))
    if resid > 1e-10 * scale:
        raise InfeasibleShapeError(
            f"correction degree {D} cannot satisfy {len(b)} conditions (residual {resid:.3e})")
    ql = tuple(coef[:D + 1])
    qr = tuple(coef[D + 1:])
    left = left0 + ((Term(ql, a, 0.0),) if np.any(ql) else ())
    right = right0 + ((Term(qr, a, 0.0),) if np.any(qr) else ())
    return TestFunction(left, right, float(alpha), int(K))


def robin_laplacian(f: TestFunction, u):
    """Second derivative; the right limit at ``u = 0``."""
    return f.derivative(2, u, side="right")


def robin_gradient(f: TestFunction, u):
    """First derivative; the right limit at ``u = 0``."""
    return f.derivative(1, u, side="right")


# ---------------------------------------------------------------------------
# Semigroup
# ---------------------------------------------------------------------------

_GL_ORDER = 10
_X, _W = np.polynomial.legendre.leggauss(_GL_ORDER)


@functools.lru_cache(maxsize=8)
def _ref_nodes(panels: int):
    """Composite Gauss-Legendre nodes and weights on ``[0, 1]``."""
    edges = np.linspace(0.0, 1.0, panels + 1)
    mid = 0.5 * (edges[:-1] + edges[1:])
    half = 0.5 * (edges[1:] - edges[:-1])
    x = (mid[:, None] + half[:, None] * _X[None, :]).ravel()
    w = (half[:, None] * _W[None, :]).ravel()
    return x, w


def _segment(lo, hi, panels):
    """Nodes ``(nu, m)`` and weights for the rows' intervals ``[lo, hi]``."""
    x, w = _ref_nodes(panels)
    L = (hi - lo)[:, None]
    return lo[:, None] + L * x[None, :], L * w[None, :]


def _as_callable(g):
    if isinstance(g, TestFunction):
        return g
    return lambda y: np.asarray(g(np.asarray(y, dtype=float)), dtype=float) + 0.0 * np.asarray(y, float)


def _h(v, t, alpha):
    s = (v + 4 * alpha * t) / (2 * math.sqrt(t))
    return np.exp(-v * v / (4 * t)) * (1.0 - 4 * alpha * math.sqrt(math.pi * t) * erfcx(s))


def _dh(v, t, alpha):
    s = (v + 4 * alpha * t) / (2 * math.sqrt(t))
    return np.exp(-v * v / (4 * t)) * (-v / (2 * t) + 4 * alpha
                                       - 8 * alpha * alpha * math.sqrt(math.pi * t) * erfcx(s))


def _semigroup_raw(g, t, u, alpha, side, deriv, panels):
    """Vectorized evaluation on one mesh. ``deriv`` selects ``d/du``."""
    gf = _as_callable(g)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    ymax = 8.0 * math.sqrt(2.0 * t)
    norm = 1.0 / math.sqrt(4 * math.pi * t)

    def even(y):
        return 0.5 * (gf(y) + gf(-y))

    def odd(y):
        return 0.5 * (gf(y) - gf(-y))

    # even part: three segments split at the peak u and the origin
    c = np.clip(0.0, u - ymax, u + ymax)
    b1 = np.minimum(c, u)
    b2 = np.maximum(c, u)
    E = np.zeros_like(u)
    for lo, hi in ((u - ymax, b1), (b1, b2), (b2, u + ymax)):
        y, w = _segment(lo, hi, panels)
        d = u[:, None] - y
        ker = np.exp(-d * d / (4 * t))
        if deriv:
            ker = ker * (-d / (2 * t))
        E += (w * ker * even(y)).sum(axis=1)
    # odd part on y > 0, split at the peak w
    wv = np.abs(u)
    lo0 = np.maximum(0.0, wv - ymax)
    O = np.zeros_like(u)
    for lo, hi in ((lo0, wv), (wv, wv + ymax)):
        y, w = _segment(lo, hi, panels)
        d = wv[:, None] - y
        s = wv[:, None] + y
        if deriv:
            ker = -d / (2 * t) * np.exp(-d * d / (4 * t)) + _dh(s, t, alpha)
        else:
            ker = np.exp(-d * d / (4 * t)) + _h(s, t, alpha)
        O += (w * ker * odd(y)).sum(axis=1)
    # the reflected term needs y in [0, lo0] too when the peak is far from 0
    far = lo0 > 0
    if np.any(far):
        y, w = _segment(np.zeros(far.sum()), lo0[far], panels)
        s = wv[far][:, None] + y
        ker = _dh(s, t, alpha) if deriv else _h(s, t, alpha)
        O[far] += (w * ker * odd(y)).sum(axis=1)
    if deriv:
        return norm * (E + O)
    sign = np.where((u > 0) | ((u == 0) & (side == "right")), 1.0, -1.0)
    return norm * (E + sign * O)


def _evaluate(g, t, u, alpha, side, deriv, tol, check, panels=12):
    scalar = np.ndim(u) == 0
    if t == 0:
        if deriv:
            if not isinstance(g, TestFunction):
                raise ValueError("the derivative at t = 0 needs a TestFunction")
            v = g.derivative(1, u, side=side)
        else:
            v = g.derivative(0, u, side=side) if isinstance(g, TestFunction) else _as_callable(g)(u)
        return float(v) if scalar else np.asarray(v, dtype=float)
    if t < 0:
        raise ValueError("t must be nonnegative")
    shape = np.shape(u)
    flat = np.ravel(np.asarray(u, dtype=float))
    v = _semigroup_raw(g, t, flat, alpha, side, deriv, panels)
    if check:
        v2 = _semigroup_raw(g, t, flat, alpha, side, deriv, 2 * panels)
        err = float(np.abs(v2 - v).max())
        if err > tol:
            raise QuadratureError("semigroup quadrature did not converge", err)
        v = v2
    return float(v[0]) if scalar else v.reshape(shape)


def apply_semigroup(g, t: float, u, alpha: float, side: str = "left", tol: float = 1e-8,
                    check: bool = True):
    """``T_t g(u)`` for a TestFunction or any bounded callable datum.

    ``side`` picks the one-sided limit at ``u = 0`` (left by default).
    With ``check`` the value is recomputed on a doubled mesh and a
    :class:`QuadratureError` is raised when the two differ by more than
    ``tol``.
    """
    return _evaluate(g, t, u, alpha, side, False, tol, check)


def semigroup_gradient(g, t: float, u, alpha: float, side: str = "right", tol: float = 1e-8,
                       check: bool = True):
    """``d/du T_t g(u)``; equal one-sided limits at the origin for ``t > 0``."""
    return _evaluate(g, t, u, alpha, side, True, tol, check)


def robin_residual(g, t: float, alpha: float) -> float:
    """``d/du T_t g(0+) - alpha (T_t g(0+) - T_t g(0-))``."""
    d = semigroup_gradient(g, t, 0.0, alpha)
    jump = apply_semigroup(g, t, 0.0, alpha, side="right") - apply_semigroup(g, t, 0.0, alpha, side="left")
    return float(d - alpha * jump)


def semigroup_property_check(g, s: float, t: float, alpha: float, probes=None) -> float:
    """Max over ``probes`` of ``|T_{t+s} g - T_t (T_s g)|``."""
    if probes is None:
        probes = np.array([-2.0, -1.0, -0.5, -0.1, 0.0, 0.1, 0.5, 1.0, 2.0])
    probes = np.asarray(probes, dtype=float)
    if s == 0 or t == 0:
        return 0.0
    direct = apply_semigroup(g, t + s, probes, alpha)
    inner = lambda y: apply_semigroup(g, s, y, alpha, check=False)
    composed = apply_semigroup(inner, t, probes, alpha)
    return float(np.abs(direct - composed).max())


# ---------------------------------------------------------------------------
# Macroscopic profile and the OU variance
# ---------------------------------------------------------------------------

@dataclass
class MacroProfile:
    """Solution ``rho(t, u)`` of the Robin heat equation from ``rho0``."""

    rho0: Callable
    alpha: float
    constant: float | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def flat(cls, c: float, alpha: float) -> "MacroProfile":
        c = float(c)
        return cls(lambda u: np.full_like(np.asarray(u, float), c), alpha, c)

    def __call__(self, t: float, u, side: str = "left", check: bool = False):
        if self.constant is not None:
            out = np.full(np.shape(u), self.constant)
            return float(out) if out.ndim == 0 else out
        if t == 0:
            uu = np.asarray(u, dtype=float)
            eps = np.where((uu == 0) & (side == "right"), 1e-300, 0.0)
            v = np.asarray(self.rho0(uu + eps), dtype=float)
            return float(v) if v.ndim == 0 else v
        return apply_semigroup(self.rho0, t, u, self.alpha, side=side, check=check)

    def boundary(self, t: float) -> tuple[float, float]:
        """``(rho(t, 0-), rho(t, 0+))``."""
        key = ("b", t)
        if key not in self._cache:
            self._cache[key] = (float(self(t, 0.0, "left")), float(self(t, 0.0, "right")))
        return self._cache[key]


@dataclass
class WeightedMeasure:
    """``2 chi(rho_t(u)) du`` plus the interface atom weighted by ``1/alpha``."""

    macro: MacroProfile
    t: float

    def density(self, u):
        r = self.macro(self.t, u)
        return 2.0 * r * (1.0 - r)

    @property
    def atom(self) -> float:
        lo, hi = self.macro.boundary(self.t)
        return (lo * (1 - hi) + hi * (1 - lo)) / self.macro.alpha


def solve_macroscopic(rho0, t: float, u, alpha: float, side: str = "left", tol: float = 1e-8):
    """``rho(t, u)`` for bounded initial data through the semigroup kernel."""
    return apply_semigroup(rho0, t, u, alpha, side=side, tol=tol)


def _gl(a, b, panels, order=_GL_ORDER):
    x, w = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(a, b, panels + 1)
    mid = 0.5 * (edges[:-1] + edges[1:])
    half = 0.5 * (edges[1:] - edges[:-1])
    return (mid[:, None] + half[:, None] * x).ravel(), (half[:, None] * w).ravel()


def _graded(a, b, levels=10, panels=1):
    """GL nodes on ``[a, b]`` refined geometrically towards ``a``."""
    if b <= a:
        return np.zeros(0), np.zeros(0)
    cuts = [a] + [a + (b - a) * 2.0 ** (-k) for k in range(levels, -1, -1)]
    xs, ws = [], []
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        x, w = _gl(lo, hi, panels)
        xs.append(x)
        ws.append(w)
    return np.concatenate(xs), np.concatenate(ws)


def ou_norm_sq(f: TestFunction, tau: float, macro: MacroProfile, r: float,
               include_atom: bool = True, u_panel: float = 0.5) -> float:
    """``|| grad T_tau f ||^2`` in ``L^2(Lambda_r)``."""
    U = f.extent + 8.0 * math.sqrt(2.0 * max(tau, 1e-12)) + 1.0
    npan = max(4, int(math.ceil(U / u_panel)))
    ul, wl = _gl(-U, 0.0, npan)
    ur, wr = _gl(0.0, U, npan)
    u = np.concatenate([ul, ur])
    w = np.concatenate([wl, wr])
    if tau == 0:
        grad = f.derivative(1, u)
        g0p = f.derivative(1, 0.0, "right")
        g0m = f.derivative(1, 0.0, "left")
    else:
        grad = semigroup_gradient(f, tau, u, f.alpha, check=False)
        g0p = g0m = float(semigroup_gradient(f, tau, 0.0, f.alpha, check=False))
    meas = WeightedMeasure(macro, r)
    val = float(np.sum(w * meas.density(u) * grad * grad))
    if include_atom:
        if abs(g0p - g0m) > 1e-6 * max(1.0, abs(g0p)):
            raise ValueError(f"one-sided gradients at 0 differ: {g0m} vs {g0p}")
        val += meas.atom * g0p * g0p
    return val


def ou_variance(f: TestFunction, s: float, t: float, macro: MacroProfile, shift: float = 0.0,
                include_atom: bool = True, levels: int = 6) -> float:
    """Conditional variance of ``Y_t(f)`` given the field at time ``s``.

    Computes ``int_s^t || grad T_{t - r + shift} f ||^2_{rho_r} dr``; the
    shift makes the composed form ``var(s, u; T_{t-u} f)`` available for
    additivity checks. The ``r`` integral is graded towards ``r = t``
    where ``T`` is close to the identity.
    """
    if not 0 <= s <= t:
        raise ValueError("need 0 <= s <= t")
    if s == t:
        return 0.0
    # substitute tau = t - r + shift, grade towards tau = shift
    taus, w = _graded(shift, shift + (t - s), levels)
    total = 0.0
    for tau, wk in zip(taus, w):
        r = t + shift - tau
        total += wk * ou_norm_sq(f, tau, macro, r, include_atom)
    return float(total)


def write_function_csv(path, u, values) -> None:
    write_csv(path, ["u", "value"], zip(np.asarray(u, float).tolist(), np.asarray(values, float).tolist()))


def write_variance_csv(path, rows) -> None:
    write_csv(path, ["s", "t", "variance"], rows)
