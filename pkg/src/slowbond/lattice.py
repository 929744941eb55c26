"""Lattices, windows, jump rates and the discrete generators.

Everything else in the package is built on the objects defined here:

* the one-dimensional rates ``xi(x, x+1)`` equal to ``1`` except at the
  slow bond ``{0, 1}`` where the rate is ``alpha / n``;
* the two-dimensional rates on ``V = {(x, y): y >= x + 1}`` used by the
  two-point correlation equation;
* finite truncations (windows) of the infinite lattices, always with
  reflecting (no-flux) boundaries.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np
import scipy.sparse as sp

__all__ = [
    "ModelParams",
    "Window1D",
    "WindowV",
    "EdgeClass",
    "TruncationError",
    "bond_rate_1d",
    "bond_rate_2d",
    "edge_class_1d",
    "edge_class_2d",
    "in_v",
    "v_neighbors",
    "apply_generator_1d",
    "apply_generator_2d",
    "bond_rates",
    "generator_matrix_1d",
    "generator_matrix_2d",
    "truncation_radius",
]


class TruncationError(IndexError):
    """A stencil reached outside the finite window it was given."""


@dataclass(frozen=True)
class ModelParams:
    """Scaling parameter ``n``, slow-bond strength ``alpha`` and horizon ``T``."""

    n: int
    alpha: float
    T: float = 1.0

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"n must be a positive integer, got {self.n!r}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha!r}")
        if not self.T >= 0:
            raise ValueError(f"T must be nonnegative, got {self.T!r}")
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "T", float(self.T))

    @property
    def slow_rate(self) -> float:
        return self.alpha / self.n


def truncation_radius(n: int, T: float, reach: float = 0.0) -> int:
    """Half-width ``L`` of a window that loses less than 1e-6 heat-kernel mass.

    ``reach`` is the macroscopic half-width of the region whose values
    matter; the window adds six diffusive standard deviations
    ``n * sqrt(2 T)`` on top of it.
    """
    return int(math.ceil(n * (reach + 6.0 * math.sqrt(2.0 * T)))) + 2


@dataclass(frozen=True)
class Window1D:
    """Finite interval ``[lo, hi]`` of sites containing the slow bond."""

    lo: int
    hi: int

    def __post_init__(self):
        if not (self.lo <= 0 < 1 <= self.hi):
            raise ValueError(f"window [{self.lo}, {self.hi}] must contain the bond {{0, 1}}")
        if self.hi - self.lo + 1 < 4:
            raise ValueError("window must contain at least 4 sites")

    @classmethod
    def symmetric(cls, L: int) -> "Window1D":
        return cls(-int(L), int(L))

    @classmethod
    def for_horizon(cls, params: ModelParams, reach: float = 0.0, T: float | None = None) -> "Window1D":
        L = truncation_radius(params.n, params.T if T is None else T, reach)
        return cls(-L, L + 1)

    @property
    def size(self) -> int:
        return self.hi - self.lo + 1

    @property
    def sites(self) -> np.ndarray:
        return np.arange(self.lo, self.hi + 1)

    @property
    def bond_index(self) -> int:
        """Array index of site 0, i.e. of the left end of the slow bond."""
        return -self.lo

    def index(self, x: int) -> int:
        if not self.lo <= x <= self.hi:
            raise TruncationError(f"site {x} outside window [{self.lo}, {self.hi}]")
        return x - self.lo

    def __contains__(self, x) -> bool:
        return self.lo <= x <= self.hi


@dataclass(frozen=True)
class WindowV:
    """Truncation ``V ∩ [-L, L]^2`` of the half plane ``y >= x + 1``."""

    L: int

    def __post_init__(self):
        if self.L < 2:
            raise ValueError("WindowV needs L >= 2")

    @classmethod
    def for_horizon(cls, params: ModelParams, reach: float = 0.0, T: float | None = None) -> "WindowV":
        return cls(truncation_radius(params.n, params.T if T is None else T, reach))

    def __contains__(self, u) -> bool:
        x, y = u
        return y >= x + 1 and abs(x) <= self.L and abs(y) <= self.L

    @property
    def size(self) -> int:
        m = 2 * self.L + 1
        return m * (m - 1) // 2

    def sites(self) -> Iterator[tuple[int, int]]:
        for x in range(-self.L, self.L + 1):
            for y in range(x + 1, self.L + 1):
                yield (x, y)

    def diagonal(self) -> list[tuple[int, int]]:
        return [(x, x + 1) for x in range(-self.L, self.L)]

    @staticmethod
    def is_diagonal(u) -> bool:
        return u[1] == u[0] + 1

    @staticmethod
    def is_vertex(u) -> bool:
        return tuple(u) == (0, 1)

    @property
    def window1d(self) -> Window1D:
        """The 1-D window holding both coordinates of every site."""
        return Window1D(-self.L, self.L)


class EdgeClass(enum.Enum):
    NORMAL = "normal"
    SLOW = "slow"


def edge_class_1d(x: int) -> EdgeClass:
    """Class of the bond ``{x, x + 1}``."""
    return EdgeClass.SLOW if x == 0 else EdgeClass.NORMAL


def bond_rate_1d(x: int, p: ModelParams) -> float:
    """Exchange rate of the bond ``{x, x + 1}``."""
    return p.alpha / p.n if x == 0 else 1.0


def in_v(u) -> bool:
    return u[1] >= u[0] + 1


def _crossed_bond(u, v) -> int | None:
    """Left end of the 1-D bond crossed by the unit step ``u -> v``."""
    dx, dy = v[0] - u[0], v[1] - u[1]
    if abs(dx) + abs(dy) != 1:
        return None
    if dx:
        return min(u[0], v[0])
    return min(u[1], v[1])


def edge_class_2d(u, v) -> EdgeClass | None:
    """Class of the edge ``(u, v)`` of ``V``; ``None`` if it is not an edge.

    An edge is slow exactly when it belongs to the set of thick segments:
    horizontal steps between the columns ``x = 0, 1`` (which forces
    ``y >= 2``) and vertical steps between the rows ``y = 0, 1`` (which
    forces ``x <= -1``). Every other edge, including those joining two
    sites of ``U`` along a column, is normal.
    """
    if not (in_v(u) and in_v(v)):
        return None
    b = _crossed_bond(u, v)
    if b is None:
        return None
    return EdgeClass.SLOW if b == 0 else EdgeClass.NORMAL


def bond_rate_2d(u, v, p: ModelParams) -> float:
    cls = edge_class_2d(u, v)
    if cls is None:
        return 0.0
    return p.alpha / p.n if cls is EdgeClass.SLOW else 1.0


_STEPS = ((1, 0), (-1, 0), (0, 1), (0, -1))


def v_neighbors(u) -> list[tuple[int, int]]:
    """Nearest neighbours of ``u`` that lie in ``V``."""
    x, y = u
    return [(x + a, y + b) for a, b in _STEPS if in_v((x + a, y + b))]


def _lookup(f, site, window):
    if window is not None and site not in window:
        raise TruncationError(f"stencil needs {site}, outside {window}")
    try:
        return f(site) if callable(f) else f[site]
    except (KeyError, IndexError) as exc:
        raise TruncationError(f"no value at {site}") from exc


def apply_generator_1d(f: Callable[[int], float], x: int, p: ModelParams,
                       window: Window1D | None = None) -> float:
    """``(A_n f)(x) = xi(x,x+1)(f(x+1)-f(x)) + xi(x-1,x)(f(x-1)-f(x))``.

    ``f`` is a callable or a mapping. When ``window`` is given the stencil
    must stay inside it.
    """
    fx = _lookup(f, x, window)
    right = _lookup(f, x + 1, window)
    left = _lookup(f, x - 1, window)
    return bond_rate_1d(x, p) * (right - fx) + bond_rate_1d(x - 1, p) * (left - fx)


def apply_generator_2d(phi, u, p: ModelParams, window: WindowV | None = None) -> float:
    """``(B_n phi)(u) = sum_{v in V} c_n(u, v) (phi(v) - phi(u))``."""
    u = tuple(u)
    pu = _lookup(phi, u, window)
    total = 0.0
    for v in v_neighbors(u):
        total += bond_rate_2d(u, v, p) * (_lookup(phi, v, window) - pu)
    return total


def bond_rates(window: Window1D, p: ModelParams) -> np.ndarray:
    """Rates of the ``size - 1`` bonds inside the window, left to right."""
    rates = np.ones(window.size - 1)
    rates[window.bond_index] = p.alpha / p.n
    return rates


def generator_matrix_1d(window: Window1D, p: ModelParams) -> sp.csr_matrix:
    """Sparse symmetric matrix of ``A_n`` on the window, reflecting ends."""
    c = bond_rates(window, p)
    diag = np.zeros(window.size)
    diag[:-1] -= c
    diag[1:] -= c
    return sp.diags([c, diag, c], [-1, 0, 1], format="csr")


def generator_matrix_2d(window: WindowV, p: ModelParams) -> tuple[sp.csr_matrix, list[tuple[int, int]]]:
    """Sparse matrix of ``B_n`` on ``window`` and the site ordering used."""
    sites = list(window.sites())
    index = {u: i for i, u in enumerate(sites)}
    rows, cols, vals = [], [], []
    for i, u in enumerate(sites):
        out = 0.0
        for v in v_neighbors(u):
            j = index.get(v)
            if j is None:
                continue
            r = bond_rate_2d(u, v, p)
            rows.append(i)
            cols.append(j)
            vals.append(r)
            out += r
        rows.append(i)
        cols.append(i)
        vals.append(-out)
    n = len(sites)
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n)), sites
