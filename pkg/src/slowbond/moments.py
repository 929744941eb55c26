"""Deterministic evolution of the mean and two-point correlation.

The mean ``rho_t(x) = E[eta_t(x)]`` solves ``d/dt rho = n^2 A_n rho`` and the
correlation ``phi_t(x, y)``, ``(x, y) in V``, solves

    d/dt phi = n^2 B_n phi + g_t,
    g_t(x, x+1) = -xi(x, x+1) * (n (rho_t(x+1) - rho_t(x)))^2,

with ``g_t = 0`` off the diagonal. Both are integrated with classical
fourth-order Runge-Kutta on reflecting windows; the correlation kernel
advances the mean in the same stages so the source is exact at every
stage time.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numba
import numpy as np

from .io import write_csv
from .lattice import (
    ModelParams,
    Window1D,
    WindowV,
    bond_rates,
    generator_matrix_1d,
    truncation_radius,
)

__all__ = [
    "InitialProfile",
    "MeanField",
    "MeanPath",
    "CorrelationField",
    "CorrelationRun",
    "StabilityError",
    "RK4_STABILITY",
    "evolve_mean",
    "mean_path",
    "discrete_gradient_sup",
    "gradient_square_sups",
    "correlation_source",
    "evolve_correlation",
    "correlation_sup_scaling",
    "duhamel_mean_check",
    "write_mean_csv",
    "write_correlation_csv",
    "write_scaling_csv",
]

# Real-axis stability interval of classical RK4.
RK4_STABILITY = 2.785


class StabilityError(ValueError):
    """Explicit step larger than the RK4 stability bound."""


@dataclass(frozen=True)
class InitialProfile:
    """Initial density, either a smooth function of ``u`` or a step.

    Sampled at ``x / n``. The step takes the value ``left`` for ``u <= 0``
    and ``right`` for ``u > 0``, matching left continuity at the origin.
    """

    kind: str
    func: Callable | None = None
    left: float = 0.5
    right: float = 0.5
    name: str = ""

    def __post_init__(self):
        if self.kind not in ("smooth", "step"):
            raise ValueError(f"unknown profile kind {self.kind!r}")
        if self.kind == "smooth" and self.func is None:
            raise ValueError("smooth profile needs a function")
        if self.kind == "step" and not (0 <= self.left <= 1 and 0 <= self.right <= 1):
            raise ValueError("step values must lie in [0, 1]")

    @classmethod
    def smooth(cls, func, name="smooth"):
        return cls("smooth", func=func, name=name)

    @classmethod
    def step(cls, left, right):
        return cls("step", left=float(left), right=float(right), name=f"step({left},{right})")

    @classmethod
    def constant(cls, c):
        c = float(c)
        return cls("smooth", func=lambda u: np.full_like(np.asarray(u, float), c), left=c, right=c,
                   name=f"constant({c})")

    @property
    def constant_value(self) -> float | None:
        """The value of a constant profile, else ``None``."""
        if self.kind == "step" and self.left == self.right:
            return self.left
        if self.name.startswith("constant("):
            return self.left
        return None

    @classmethod
    def tanh(cls, center=0.5, amplitude=0.25):
        return cls("smooth", func=lambda u: center + amplitude * np.tanh(u),
                   name=f"tanh({center},{amplitude})")

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        if self.kind == "step":
            return np.where(u <= 0, self.left, self.right)
        return np.asarray(self.func(u), dtype=float) + 0.0 * u

    def sample(self, window: Window1D, n: int) -> np.ndarray:
        vals = self(window.sites / n)
        if np.any(vals < 0) or np.any(vals > 1):
            raise ValueError(f"profile {self.name} leaves [0, 1]")
        return vals


@dataclass
class MeanField:
    window: Window1D
    values: np.ndarray
    time: float = 0.0

    @classmethod
    def from_profile(cls, profile: InitialProfile, window: Window1D, n: int) -> "MeanField":
        return cls(window, profile.sample(window, n), 0.0)

    def __call__(self, x):
        return self.values[self.window.index(x)]

    def restrict(self, window: Window1D) -> "MeanField":
        if window.lo < self.window.lo or window.hi > self.window.hi:
            raise ValueError("restriction window is larger than the field's window")
        i = window.lo - self.window.lo
        return MeanField(window, self.values[i:i + window.size].copy(), self.time)


@dataclass
class MeanPath:
    """Mean field stored on a grid of macroscopic times."""

    window: Window1D
    params: ModelParams
    times: np.ndarray
    values: np.ndarray  # shape (len(times), window.size)

    def at(self, k: int) -> MeanField:
        return MeanField(self.window, self.values[k], float(self.times[k]))

    @property
    def final(self) -> MeanField:
        return self.at(len(self.times) - 1)


@dataclass
class CorrelationField:
    """Values of ``phi`` on ``window``; dense array indexed ``[x + L, y + L]``."""

    window: WindowV
    values: np.ndarray
    time: float = 0.0

    @classmethod
    def zeros(cls, window: WindowV) -> "CorrelationField":
        m = 2 * window.L + 1
        return cls(window, np.zeros((m, m)), 0.0)

    def __call__(self, x, y):
        if (x, y) not in self.window:
            raise KeyError(f"({x}, {y}) is not a site of {self.window}")
        L = self.window.L
        return self.values[x + L, y + L]

    def mask(self) -> np.ndarray:
        m = 2 * self.window.L + 1
        i, j = np.indices((m, m))
        return j >= i + 1

    def sup_abs(self) -> tuple[float, tuple[int, int]]:
        a = np.where(self.mask(), np.abs(self.values), -1.0)
        k = np.unravel_index(np.argmax(a), a.shape)
        L = self.window.L
        return float(a[k]), (int(k[0]) - L, int(k[1]) - L)


@dataclass
class CorrelationRun:
    """Output of :func:`evolve_correlation`."""

    field: CorrelationField
    mean: MeanField
    sup_abs: float        # sup over the time grid and the window of |phi|
    sup_time: float
    sup_site: tuple[int, int]
    sup_history: np.ndarray = field(repr=False)  # per-step sup_V |phi|
    dt: float = 0.0


# ---------------------------------------------------------------------------
# 1-D mean
# ---------------------------------------------------------------------------

@numba.njit(cache=True)
def _mean_rhs(rho, c, n2, out):
    m = rho.shape[0]
    for i in range(m):
        acc = 0.0
        if i + 1 < m:
            acc += c[i] * (rho[i + 1] - rho[i])
        if i > 0:
            acc += c[i - 1] * (rho[i - 1] - rho[i])
        out[i] = n2 * acc


@numba.njit(cache=True)
def _rk4_mean(rho0, c, n2, dt, nsteps, record_every):
    m = rho0.shape[0]
    nrec = nsteps // record_every + 1
    rec = np.empty((nrec, m))
    rho = rho0.copy()
    k1 = np.empty(m)
    k2 = np.empty(m)
    k3 = np.empty(m)
    k4 = np.empty(m)
    tmp = np.empty(m)
    rec[0] = rho
    r = 1
    for step in range(1, nsteps + 1):
        _mean_rhs(rho, c, n2, k1)
        for i in range(m):
            tmp[i] = rho[i] + 0.5 * dt * k1[i]
        _mean_rhs(tmp, c, n2, k2)
        for i in range(m):
            tmp[i] = rho[i] + 0.5 * dt * k2[i]
        _mean_rhs(tmp, c, n2, k3)
        for i in range(m):
            tmp[i] = rho[i] + dt * k3[i]
        _mean_rhs(tmp, c, n2, k4)
        for i in range(m):
            rho[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
        if step % record_every == 0:
            rec[r] = rho
            r += 1
    return rho, rec


def _spectral_bound_1d(p: ModelParams) -> float:
    # Gershgorin: rows of n^2 A_n have |diagonal| and off-diagonal mass <= 2 r n^2,
    # r the largest bond rate (above 1 only when alpha > n).
    return 4.0 * p.n ** 2 * max(1.0, p.slow_rate)


def _steps(t: float, dt: float) -> tuple[int, float]:
    if t <= 0:
        return 0, 0.0
    k = max(1, int(math.ceil(t / dt - 1e-12)))
    return k, t / k


def _check_dt(dt: float, bound: float):
    if dt * bound > RK4_STABILITY:
        raise StabilityError(
            f"dt={dt:.3e} exceeds the RK4 stability bound {RK4_STABILITY / bound:.3e}")


def evolve_mean(rho0: MeanField, p: ModelParams, t: float, dt: float | None = None,
                cfl: float = 0.25) -> MeanField:
    """Solve ``d/dt rho = n^2 A_n rho`` up to macroscopic time ``t``.

    The default step is ``cfl / (4 n^2)``; any ``dt`` beyond the RK4
    stability limit raises :class:`StabilityError`.
    """
    if t < 0:
        raise ValueError("t must be nonnegative")
    bound = _spectral_bound_1d(p)
    if dt is None:
        dt = cfl / bound
    _check_dt(dt, bound)
    nsteps, h = _steps(t, dt)
    if nsteps == 0:
        return MeanField(rho0.window, rho0.values.copy(), rho0.time)
    c = bond_rates(rho0.window, p)
    rho, _ = _rk4_mean(rho0.values.astype(float), c, float(p.n) ** 2, h, nsteps, nsteps)
    return MeanField(rho0.window, rho, rho0.time + t)


def mean_path(rho0: MeanField, p: ModelParams, T: float | None = None, spacing: float = 1e-3,
              cfl: float = 0.25) -> MeanPath:
    """Mean field recorded every ``spacing`` (or finer) up to ``T``."""
    T = p.T if T is None else T
    bound = _spectral_bound_1d(p)
    dt = cfl / bound
    nrec = max(1, int(math.ceil(T / spacing - 1e-12)))
    per = max(1, int(math.ceil((T / nrec) / dt - 1e-12)))
    nsteps = per * nrec
    h = T / nsteps
    _check_dt(h, bound)
    c = bond_rates(rho0.window, p)
    _, rec = _rk4_mean(rho0.values.astype(float), c, float(p.n) ** 2, h, nsteps, per)
    times = rho0.time + np.arange(nrec + 1) * (T / nrec)
    return MeanPath(rho0.window, p, times, rec)


def discrete_gradient_sup(path: MeanPath) -> tuple[float, float, int]:
    """``sup_{t, x != 0} n |rho_t(x+1) - rho_t(x)|`` with its time and site."""
    n = path.params.n
    grad = n * np.abs(np.diff(path.values, axis=1))
    grad[:, path.window.bond_index] = -np.inf
    k = np.unravel_index(np.argmax(grad), grad.shape)
    return float(grad[k]), float(path.times[k[0]]), int(k[1] + path.window.lo)


def gradient_square_sups(path: MeanPath) -> tuple[float, float]:
    """``(S_n, S_n0)``: sup of ``(grad^+ rho)^2`` off and at the slow bond."""
    n = path.params.n
    g2 = (n * np.diff(path.values, axis=1)) ** 2
    b = path.window.bond_index
    at_bond = float(g2[:, b].max())
    g2[:, b] = 0.0
    return float(g2.max()), at_bond


def correlation_source(rho: MeanField, x: int, y: int, p: ModelParams) -> float:
    """Source term of the correlation equation at ``(x, y)`` in ``V``."""
    if y < x + 1:
        raise ValueError(f"({x}, {y}) is not in V")
    if y != x + 1:
        return 0.0
    grad = p.n * (rho(x + 1) - rho(x))
    weight = p.alpha / p.n if x == 0 else 1.0
    return -weight * grad * grad


# ---------------------------------------------------------------------------
# 2-D correlation
# ---------------------------------------------------------------------------

@numba.njit(cache=True)
def _corr_rhs(P, rho, c, n, out_P, out_rho):
    m = rho.shape[0]
    n2 = n * n
    for i in range(m):
        acc = 0.0
        if i + 1 < m:
            acc += c[i] * (rho[i + 1] - rho[i])
        if i > 0:
            acc += c[i - 1] * (rho[i - 1] - rho[i])
        out_rho[i] = n2 * acc
    for i in range(m):
        for j in range(i + 1, m):
            p0 = P[i, j]
            acc = 0.0
            if i > 0:
                acc += c[i - 1] * (P[i - 1, j] - p0)
            if j >= i + 2:
                acc += c[i] * (P[i + 1, j] - p0)
                acc += c[j - 1] * (P[i, j - 1] - p0)
            if j + 1 < m:
                acc += c[j] * (P[i, j + 1] - p0)
            val = n2 * acc
            if j == i + 1:
                g = rho[i + 1] - rho[i]
                val -= c[i] * n2 * g * g
            out_P[i, j] = val


@numba.njit(cache=True)
def _axpy_tri(dst, base, h, k):
    m = base.shape[0]
    for i in range(m):
        for j in range(i + 1, m):
            dst[i, j] = base[i, j] + h * k[i, j]


@numba.njit(cache=True)
def _rk4_corr(P0, rho0, c, n, dt, nsteps):
    m = rho0.shape[0]
    P = P0.copy()
    rho = rho0.copy()
    k1 = np.zeros_like(P)
    k2 = np.zeros_like(P)
    k3 = np.zeros_like(P)
    k4 = np.zeros_like(P)
    tP = P.copy()
    r1 = np.empty(m)
    r2 = np.empty(m)
    r3 = np.empty(m)
    r4 = np.empty(m)
    tr = np.empty(m)
    hist = np.empty(nsteps + 1)
    best = 0.0
    best_step = 0
    best_i = 0
    best_j = 1
    for i in range(m):
        for j in range(i + 1, m):
            a = abs(P[i, j])
            if a > best:
                best = a
                best_i = i
                best_j = j
    hist[0] = best
    for step in range(1, nsteps + 1):
        _corr_rhs(P, rho, c, n, k1, r1)
        _axpy_tri(tP, P, 0.5 * dt, k1)
        for i in range(m):
            tr[i] = rho[i] + 0.5 * dt * r1[i]
        _corr_rhs(tP, tr, c, n, k2, r2)
        _axpy_tri(tP, P, 0.5 * dt, k2)
        for i in range(m):
            tr[i] = rho[i] + 0.5 * dt * r2[i]
        _corr_rhs(tP, tr, c, n, k3, r3)
        _axpy_tri(tP, P, dt, k3)
        for i in range(m):
            tr[i] = rho[i] + dt * r3[i]
        _corr_rhs(tP, tr, c, n, k4, r4)
        cur = 0.0
        ci = 0
        cj = 1
        h6 = dt / 6.0
        for i in range(m):
            rho[i] += h6 * (r1[i] + 2.0 * r2[i] + 2.0 * r3[i] + r4[i])
            for j in range(i + 1, m):
                v = P[i, j] + h6 * (k1[i, j] + 2.0 * k2[i, j] + 2.0 * k3[i, j] + k4[i, j])
                P[i, j] = v
                a = abs(v)
                if a > cur:
                    cur = a
                    ci = i
                    cj = j
        hist[step] = cur
        if cur > best:
            best = cur
            best_step = step
            best_i = ci
            best_j = cj
    return P, rho, hist, best, best_step, best_i, best_j


def _spectral_bound_2d(p: ModelParams) -> float:
    return 8.0 * p.n ** 2 * max(1.0, p.slow_rate)


def evolve_correlation(phi0: CorrelationField | None, rho0: MeanField, p: ModelParams, t: float,
                       window: WindowV | None = None, dt: float | None = None,
                       cfl: float = 2.0) -> CorrelationRun:
    """Integrate the sourced correlation equation up to time ``t``.

    ``rho0`` is the mean at the start; it is advanced together with ``phi``
    so that the diagonal source uses the mean at every RK4 stage. The
    window of ``phi0`` (or ``window``, or the truncation rule) fixes the
    lattice; ``rho0`` must cover ``[-L, L]``.
    """
    if phi0 is not None:
        window = phi0.window
    elif window is None:
        window = WindowV(truncation_radius(p.n, t))
    bound = _spectral_bound_2d(p)
    if dt is None:
        dt = cfl / bound
    _check_dt(dt, bound)
    nsteps, h = _steps(t, dt)
    w1 = window.window1d
    rho = rho0.restrict(w1)
    P0 = (CorrelationField.zeros(window) if phi0 is None else phi0).values.astype(float)
    c = bond_rates(w1, p)
    t0 = rho0.time
    if nsteps == 0:
        fld = CorrelationField(window, P0.copy(), t0)
        s, site = fld.sup_abs()
        return CorrelationRun(fld, rho, s, t0, site, np.array([s]), 0.0)
    P, r, hist, best, bstep, bi, bj = _rk4_corr(P0, rho.values.astype(float), c, float(p.n), h, nsteps)
    L = window.L
    return CorrelationRun(
        CorrelationField(window, P, t0 + t),
        MeanField(w1, r, t0 + t),
        float(best), t0 + bstep * h, (int(bi) - L, int(bj) - L), hist, h,
    )


def correlation_sup_scaling(profile: InitialProfile, alpha: float, T: float, n_list,
                            reach: float = 0.0, cfl: float = 2.0) -> list[tuple[int, float, float]]:
    """Rows ``(n, sup_{t<=T, V} |phi|, sup * n / log n)`` for product initial data."""
    rows = []
    for n in n_list:
        p = ModelParams(n, alpha, T)
        L = truncation_radius(n, T, reach)
        w = WindowV(L)
        rho0 = MeanField.from_profile(profile, w.window1d, n)
        run = evolve_correlation(None, rho0, p, T, window=w, cfl=cfl)
        rows.append((n, run.sup_abs, run.sup_abs * n / math.log(n)))
    return rows


# ---------------------------------------------------------------------------
# Duhamel representation through the slow-bond walk
# ---------------------------------------------------------------------------

def duhamel_mean_check(rho0: MeanField, p: ModelParams, t: float, x: int,
                       reference: np.ndarray | None = None) -> tuple[float, float]:
    """Compare the RK4 mean with its walk representation at site ``x``.

    With ``gamma = rho - h`` for a fixed reference ``h`` (default: the
    initial datum), ``gamma`` solves the same equation with source
    ``F = n^2 A_n h``, so

        rho_t(x) = h(x) + E_x[gamma_0(X_{t n^2})] + int_0^t E_x[F(X_{s n^2})] ds.

    Expectations over the walk use its transition probabilities from the
    spectral decomposition of the (symmetric) generator; the time integral
    is done in closed form per eigenmode.
    """
    w = rho0.window
    if w.size > 201:
        raise ValueError(f"window has {w.size} sites; the walk oracle is limited to 201")
    h = rho0.values if reference is None else np.asarray(reference, float)
    Q = (p.n ** 2) * generator_matrix_1d(w, p).toarray()
    lam, V = np.linalg.eigh(Q)
    gamma0 = rho0.values - h
    F = Q @ h
    i = w.index(x)
    z = lam * t
    with np.errstate(divide="ignore", invalid="ignore"):
        phi1 = np.where(np.abs(z) > 1e-12, np.expm1(z) / np.where(z == 0, 1, z), 1.0 + z / 2)
    row = V[i, :]
    walk_gamma0 = row @ (np.exp(z) * (V.T @ gamma0))
    walk_source = row @ (t * phi1 * (V.T @ F))
    walk_value = h[i] + walk_gamma0 + walk_source
    solver_value = evolve_mean(rho0, p, t)(x)
    return float(solver_value), float(walk_value)


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------

def write_mean_csv(path, fields) -> None:
    """``t,x,value`` rows for a MeanField, a list of them, or a MeanPath."""
    if isinstance(fields, MeanPath):
        fields = [fields.at(k) for k in range(len(fields.times))]
    elif isinstance(fields, MeanField):
        fields = [fields]
    rows = ((f.time, int(x), float(v)) for f in fields for x, v in zip(f.window.sites, f.values))
    write_csv(path, ["t", "x", "value"], rows)


def write_correlation_csv(path, fields) -> None:
    if isinstance(fields, CorrelationField):
        fields = [fields]

    def rows():
        for f in fields:
            L = f.window.L
            for x, y in f.window.sites():
                yield (f.time, x, y, float(f.values[x + L, y + L]))

    write_csv(path, ["t", "x", "y", "value"], rows())


def write_scaling_csv(path, rows) -> None:
    write_csv(path, ["n", "sup_phi", "normalized"], rows)
