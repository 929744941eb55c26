"""Random walks with slow edges, their local times and exact transition laws.

Walk kinds
----------
``slow1d``              Z, rate 1 per bond, ``alpha/n`` on ``{0, 1}``
``simple1d-rate2``      Z, rate 1 per bond (total rate 2)
``reflected-halfline``  {1, 2, ...}, rate 1 per bond, reflected at 1
``triangle``            W = {0 <= x <= y}, rate 1 per edge, reflected
``slow2d``              V = {y >= x + 1}, rates of the correlation generator
``simple2d-rate2``      Z^2, rate 1/2 per edge (total rate 2)
``quadrant``            {x, y >= 0}, rate 1/2 per edge, reflected
``diag-fold``           W with rate 1 out of diagonal sites, 1/2 elsewhere

Times are microscopic throughout this module; the diffusive clock
``t n^2`` is the caller's business.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numba
import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.linalg import expm_multiply

from .io import write_csv
from .lattice import ModelParams, Window1D, WindowV
from .rng import mean_ci, replica_seeds

__all__ = [
    "KINDS",
    "WalkSpec",
    "Target",
    "LocalTimeRecord",
    "LocalTimeEnsemble",
    "TransitionTable",
    "FiniteChain",
    "LumpingError",
    "StateLimitError",
    "simulate_walk",
    "simulate_walks",
    "simulate_chain",
    "build_chain",
    "transition_probabilities",
    "heat_kernel_folding_check",
    "folding_sweep",
    "lumping_check",
    "check_lumpable",
    "rate_monotonicity_check",
    "local_time_bounds_2d",
    "occupation_integral",
    "occupation_integral_spectral",
    "write_local_time_csv",
]

KINDS = {
    "slow1d": 0,
    "simple1d-rate2": 1,
    "reflected-halfline": 2,
    "triangle": 3,
    "slow2d": 4,
    "simple2d-rate2": 5,
    "quadrant": 6,
    "diag-fold": 7,
}
_ONE_D = {"slow1d", "simple1d-rate2", "reflected-halfline"}
MAX_STATES = 40_000


class LumpingError(ValueError):
    """The equivalence relation is not compatible with the rates."""


class StateLimitError(ValueError):
    """Too many states for the transition-probability oracle."""


@dataclass(frozen=True)
class WalkSpec:
    """Kind, slow-bond data and starting site of a walk.

    ``alpha = 0`` is allowed here and freezes the slow edges.
    """

    kind: str
    n: int = 1
    alpha: float = 1.0
    start: tuple = (0,)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown walk kind {self.kind!r}; choose from {sorted(KINDS)}")
        if self.n < 1 or self.alpha < 0:
            raise ValueError("need n >= 1 and alpha >= 0")
        s = self.start
        s = (int(s),) if np.isscalar(s) else tuple(int(v) for v in s)
        if self.dim == 1 and len(s) == 2 and s[1] == 0:
            s = s[:1]
        if len(s) != self.dim:
            raise ValueError(f"start {self.start!r} has the wrong dimension for {self.kind}")
        object.__setattr__(self, "start", s)
        if not self.contains(s):
            raise ValueError(f"start {s} is not in the state space of {self.kind}")

    @classmethod
    def from_params(cls, kind: str, p: ModelParams, start) -> "WalkSpec":
        return cls(kind, p.n, p.alpha, start)

    @property
    def dim(self) -> int:
        return 1 if self.kind in _ONE_D else 2

    @property
    def slow_rate(self) -> float:
        return self.alpha / self.n

    @property
    def code(self) -> int:
        return KINDS[self.kind]

    def with_start(self, start) -> "WalkSpec":
        return WalkSpec(self.kind, self.n, self.alpha, start)

    def contains(self, u) -> bool:
        u = (u,) if np.isscalar(u) else tuple(u)
        if self.dim == 1:
            return self.kind != "reflected-halfline" or u[0] >= 1
        x, y = u
        return bool(_in_space(self.code, x, y))

    def rates(self, u) -> list[tuple[tuple, float]]:
        """Outgoing ``(site, rate)`` pairs; zero-rate moves are dropped."""
        u = (u,) if np.isscalar(u) else tuple(u)
        x, y = (u[0], 0) if self.dim == 1 else u
        mx = np.zeros(4, np.int64)
        my = np.zeros(4, np.int64)
        mr = np.zeros(4)
        ms = np.zeros(4, np.bool_)
        k = _moves(self.code, x, y, self.slow_rate, mx, my, mr, ms)
        out = []
        for i in range(k):
            if mr[i] > 0:
                v = (int(mx[i]),) if self.dim == 1 else (int(mx[i]), int(my[i]))
                out.append((v, float(mr[i])))
        return out

    def max_rate(self) -> float:
        base = 0.5 if self.kind in ("simple2d-rate2", "quadrant") else 1.0
        if self.kind in ("slow1d", "slow2d"):
            return max(base, self.slow_rate)
        return base

    def default_window(self, t: float, extra: int = 0):
        """Box around the start holding all but a Gaussian-negligible mass."""
        h = int(math.ceil(7.0 * math.sqrt(2.0 * self.max_rate() * max(t, 1.0)))) + 4 + extra
        if self.dim == 1:
            x = self.start[0]
            return (x - h, x + h)
        x, y = self.start
        return ((x - h, x + h), (y - h, y + h))


# ---------------------------------------------------------------------------
# numba move tables
# ---------------------------------------------------------------------------

@numba.njit(cache=True)
def _in_space(kind, x, y):
    if kind == 0 or kind == 1:
        return True
    if kind == 2:
        return x >= 1
    if kind == 3 or kind == 7:
        return 0 <= x and x <= y
    if kind == 4:
        return y >= x + 1
    if kind == 5:
        return True
    if kind == 6:
        return x >= 0 and y >= 0
    return False


@numba.njit(cache=True)
def _moves(kind, x, y, slow, mx, my, mr, ms):
    """Fill the move arrays for the state ``(x, y)``; return the move count."""
    k = 0
    if kind <= 2:
        for d in (1, -1):
            v = x + d
            if kind == 2 and v < 1:
                continue
            b = x if d == 1 else v
            mx[k] = v
            my[k] = 0
            if kind == 0 and b == 0:
                mr[k] = slow
                ms[k] = True
            else:
                mr[k] = 1.0
                ms[k] = False
            k += 1
        return k
    for s in range(4):
        dx = 0
        dy = 0
        if s == 0:
            dx = 1
        elif s == 1:
            dx = -1
        elif s == 2:
            dy = 1
        else:
            dy = -1
        vx = x + dx
        vy = y + dy
        if not _in_space(kind, vx, vy):
            continue
        mx[k] = vx
        my[k] = vy
        ms[k] = False
        if kind == 4:
            if dx != 0:
                b = min(x, vx)
            else:
                b = min(y, vy)
            if b == 0:
                mr[k] = slow
                ms[k] = True
            else:
                mr[k] = 1.0
        elif kind == 5 or kind == 6:
            mr[k] = 0.5
        elif kind == 7:
            mr[k] = 1.0 if x == y else 0.5
        else:
            mr[k] = 1.0
        k += 1
    return k


# target codes
_T_ALL, _T_SET, _T_UPPER, _T_DIAG, _T_WBOUND, _T_AXES, _T_VERTEX = range(7)
_OFF = 1 << 30


@dataclass(frozen=True)
class Target:
    """Set of sites whose local time is recorded.

    ``name`` is one of ``all``, ``upper_diagonal`` (``D`` minus ``(0, 1)``),
    ``diagonal`` (``x == y``), ``w_boundary`` (``x == 0`` or ``x == y``),
    ``axes_boundary`` (``x == 0`` or ``y == 0``), ``vertex`` (``(0, 1)``) or
    ``set`` with explicit ``sites``. ``negate`` takes the complement.
    """

    name: str
    sites: tuple = ()
    negate: bool = False

    _CODES = {"all": _T_ALL, "set": _T_SET, "upper_diagonal": _T_UPPER, "diagonal": _T_DIAG,
              "w_boundary": _T_WBOUND, "axes_boundary": _T_AXES, "vertex": _T_VERTEX}

    def __post_init__(self):
        if self.name not in self._CODES:
            raise ValueError(f"unknown target {self.name!r}")

    @classmethod
    def of(cls, sites: Iterable) -> "Target":
        norm = []
        for s in sites:
            norm.append((int(s), 0) if np.isscalar(s) else (int(s[0]), int(s[1]) if len(s) > 1 else 0))
        return cls("set", tuple(sorted(set(norm))))

    def complement(self) -> "Target":
        return Target(self.name, self.sites, not self.negate)

    @property
    def code(self) -> int:
        return self._CODES[self.name]

    def keys(self) -> np.ndarray:
        return np.array(sorted(_key(x, y) for x, y in self.sites), dtype=np.int64)

    def contains(self, u) -> bool:
        x, y = (u, 0) if np.isscalar(u) else (u[0], u[1] if len(u) > 1 else 0)
        keys = self.keys()
        return bool(_in_target(self.code, self.negate, x, y, keys))


def _key(x, y):
    return (int(x) + _OFF) * (2 * _OFF) + (int(y) + _OFF)


@numba.njit(cache=True)
def _in_target(code, negate, x, y, keys):
    if code == 0:
        r = True
    elif code == 1:
        key = (x + 1073741824) * 2147483648 + (y + 1073741824)
        i = np.searchsorted(keys, key)
        r = i < keys.shape[0] and keys[i] == key
    elif code == 2:
        r = y == x + 1 and not (x == 0 and y == 1)
    elif code == 3:
        r = x == y
    elif code == 4:
        r = x == 0 or x == y
    elif code == 5:
        r = x == 0 or y == 0
    else:
        r = x == 0 and y == 1
    return r != negate


@numba.njit(cache=True)
def _run_walks(kind, slow, x0, y0, t, codes, negs, key_flat, key_ptr, seeds):
    M = seeds.shape[0]
    nt = codes.shape[0]
    local = np.zeros((M, nt))
    cross = np.zeros(M, np.int64)
    jumps = np.zeros(M, np.int64)
    fx = np.zeros(M, np.int64)
    fy = np.zeros(M, np.int64)
    mx = np.zeros(4, np.int64)
    my = np.zeros(4, np.int64)
    mr = np.zeros(4)
    ms = np.zeros(4, np.bool_)
    for r in range(M):
        np.random.seed(seeds[r])
        x = x0
        y = y0
        now = 0.0
        while now < t:
            k = _moves(kind, x, y, slow, mx, my, mr, ms)
            tot = 0.0
            for i in range(k):
                tot += mr[i]
            if tot > 0.0:
                h = np.random.exponential(1.0 / tot)
            else:
                h = np.inf
            dwell = min(h, t - now)
            for j in range(nt):
                if _in_target(codes[j], negs[j], x, y, key_flat[key_ptr[j]:key_ptr[j + 1]]):
                    local[r, j] += dwell
            now += h
            if now >= t:
                break
            u = np.random.random() * tot
            c = 0
            acc = mr[0]
            while acc <= u and c < k - 1:
                c += 1
                acc += mr[c]
            if ms[c]:
                cross[r] += 1
            x = mx[c]
            y = my[c]
            jumps[r] += 1
        fx[r] = x
        fy[r] = y
    return local, cross, jumps, fx, fy


@dataclass
class LocalTimeRecord:
    """Local times of the targets, slow-edge crossings and the final site."""

    local_times: np.ndarray
    crossings: int
    t: float
    final: tuple
    jumps: int = 0
    targets: tuple = ()


@dataclass
class LocalTimeEnsemble:
    """Per-replica local times ``(M, n_targets)``, crossings and final sites."""

    local_times: np.ndarray
    crossings: np.ndarray
    final: np.ndarray
    t: float
    targets: tuple = ()
    jumps: np.ndarray = field(default=None, repr=False)

    def mean_ci(self, j: int = 0, sigmas: float = 3.0) -> tuple[float, float]:
        return mean_ci(self.local_times[:, j], sigmas)


def _target_arrays(targets: Sequence[Target]):
    codes = np.array([tg.code for tg in targets], dtype=np.int64)
    negs = np.array([tg.negate for tg in targets], dtype=np.bool_)
    keys = [tg.keys() for tg in targets]
    ptr = np.zeros(len(targets) + 1, dtype=np.int64)
    ptr[1:] = np.cumsum([len(k) for k in keys])
    flat = np.concatenate(keys) if keys else np.zeros(0, np.int64)
    return codes, negs, flat.astype(np.int64), ptr


def simulate_walks(spec: WalkSpec, t: float, targets: Sequence[Target] = (Target("all"),),
                   replicas: int = 1, seed: int = 0, offset: int = 0) -> LocalTimeEnsemble:
    """Event-driven simulation of independent replicas.

    Replica ``i`` uses the seed word derived from ``(seed, offset + i)``,
    so splitting a run into batches gives the same numbers.
    """
    if t < 0:
        raise ValueError("t must be nonnegative")
    targets = tuple(targets)
    codes, negs, flat, ptr = _target_arrays(targets)
    x0 = spec.start[0]
    y0 = spec.start[1] if spec.dim == 2 else 0
    seeds = replica_seeds(seed, replicas, offset)
    local, cross, jumps, fx, fy = _run_walks(spec.code, spec.slow_rate, x0, y0, float(t),
                                             codes, negs, flat, ptr, seeds)
    final = fx[:, None] if spec.dim == 1 else np.stack([fx, fy], axis=1)
    return LocalTimeEnsemble(local, cross, final, float(t), targets, jumps)


def simulate_walk(spec: WalkSpec, t: float, targets: Sequence[Target] = (Target("all"),),
                  seed: int = 0) -> LocalTimeRecord:
    ens = simulate_walks(spec, t, targets, 1, seed)
    return LocalTimeRecord(ens.local_times[0].copy(), int(ens.crossings[0]), float(t),
                           tuple(int(v) for v in ens.final[0]), int(ens.jumps[0]), ens.targets)


# ---------------------------------------------------------------------------
# Finite chains and the transition-probability oracle
# ---------------------------------------------------------------------------

@dataclass
class FiniteChain:
    """A walk restricted to a finite box with reflecting edges."""

    states: list
    index: dict
    Q: sp.csr_matrix  # generator, rows sum to zero

    @property
    def size(self) -> int:
        return len(self.states)

    def is_symmetric(self, tol: float = 0.0) -> bool:
        d = abs(self.Q - self.Q.T)
        return d.nnz == 0 or d.max() <= tol


def _box(spec: WalkSpec, window):
    if window is None:
        raise ValueError("a window is required")
    if isinstance(window, Window1D):
        return (window.lo, window.hi), (0, 0)
    if isinstance(window, WindowV):
        return (-window.L, window.L), (-window.L, window.L)
    if spec.dim == 1:
        lo, hi = window
        return (int(lo), int(hi)), (0, 0)
    (a, b), (c, d) = window
    return (int(a), int(b)), (int(c), int(d))


def build_chain(spec: WalkSpec, window) -> FiniteChain:
    (xlo, xhi), (ylo, yhi) = _box(spec, window)
    if spec.dim == 1:
        states = [(x,) for x in range(xlo, xhi + 1) if spec.contains((x,))]
    else:
        states = [(x, y) for x in range(xlo, xhi + 1) for y in range(ylo, yhi + 1)
                  if spec.contains((x, y))]
    if len(states) > MAX_STATES:
        raise StateLimitError(f"{len(states)} states exceed the limit of {MAX_STATES}")
    if not states:
        raise ValueError("window contains no states")
    index = {u: i for i, u in enumerate(states)}
    rows, cols, vals = [], [], []
    for i, u in enumerate(states):
        out = 0.0
        for v, r in spec.rates(u):
            j = index.get(v)
            if j is None:
                continue
            rows.append(i)
            cols.append(j)
            vals.append(r)
            out += r
        rows.append(i)
        cols.append(i)
        vals.append(-out)
    m = len(states)
    Q = sp.csr_matrix((vals, (rows, cols)), shape=(m, m))
    return FiniteChain(states, index, Q)


@dataclass
class TransitionTable:
    """``P_x[Z_t = y]`` for the rows ``starts`` and every state of the window."""

    states: list
    starts: list
    matrix: np.ndarray
    t: float

    def __post_init__(self):
        self._col = {u: i for i, u in enumerate(self.states)}
        self._row = {u: i for i, u in enumerate(self.starts)}

    def prob(self, x, y) -> float:
        x = (x,) if np.isscalar(x) else tuple(x)
        y = (y,) if np.isscalar(y) else tuple(y)
        j = self._col.get(y)
        if j is None:
            return 0.0
        return float(self.matrix[self._row[x], j])

    def row(self, x) -> np.ndarray:
        x = (x,) if np.isscalar(x) else tuple(x)
        return self.matrix[self._row[x]]


_DENSE_LIMIT = 2500


def _propagate(chain: FiniteChain, t: float, start_idx=None) -> np.ndarray:
    """Rows of ``exp(t Q)`` (all rows when ``start_idx`` is None)."""
    m = chain.size
    if t == 0:
        E = np.eye(m)
        return E if start_idx is None else E[start_idx]
    if m <= _DENSE_LIMIT:
        P = sla.expm(t * chain.Q.toarray())
        return P if start_idx is None else P[start_idx]
    idx = range(m) if start_idx is None else start_idx
    B = np.zeros((m, len(idx)))
    for k, i in enumerate(idx):
        B[i, k] = 1.0
    # row x of exp(tQ) is column x of exp(t Q^T)
    return expm_multiply(t * chain.Q.T.tocsc(), B).T


def transition_probabilities(spec: WalkSpec, t: float, window=None, starts=None) -> TransitionTable:
    """Solve the forward equation on a reflecting window.

    Uses a dense Pade matrix exponential up to 2500 states and Krylov
    ``expm_multiply`` beyond, with at most 40 000 states. ``starts``
    restricts the rows (default: every state, or just the spec's start on
    large windows).
    """
    if t < 0:
        raise ValueError("t must be nonnegative")
    window = spec.default_window(t) if window is None else window
    chain = build_chain(spec, window)
    if starts is None:
        starts = list(chain.states) if chain.size <= _DENSE_LIMIT else [spec.start]
    starts = [(s,) if np.isscalar(s) else tuple(s) for s in starts]
    idx = [chain.index[s] for s in starts]
    P = _propagate(chain, t, idx)
    P = np.clip(P, 0.0, None)
    return TransitionTable(chain.states, starts, P, float(t))


# ---------------------------------------------------------------------------
# Folding and lumping
# ---------------------------------------------------------------------------

def _fold_window(R: int) -> tuple[int, int]:
    # invariant under x -> -x + 1
    return (-R + 1, R)


def folding_sweep(xs, ys, ts, alphas, n: int, margin: int = 30) -> np.ndarray:
    """``|lhs - rhs|`` over a grid; array of shape (ts, alphas, xs, ys)."""
    xs = np.asarray(list(xs))
    ys = np.asarray(list(ys))
    R = int(max(np.abs(xs).max(), np.abs(ys).max())) + 1 + margin + int(10 * math.sqrt(max(ts)))
    win = _fold_window(R)
    out = np.zeros((len(ts), len(alphas), len(xs), len(ys)))
    simple = build_chain(WalkSpec("simple1d-rate2", n, 1.0, 1), win)
    for a, t in enumerate(ts):
        Ps = sla.expm(t * simple.Q.toarray())
        for b, alpha in enumerate(alphas):
            slow = build_chain(WalkSpec("slow1d", n, alpha, 1), win)
            Pw = sla.expm(t * slow.Q.toarray())
            lo = win[0]
            xi = xs - lo
            yi = ys - lo
            yr = (-ys + 1) - lo
            lhs = Pw[np.ix_(xi, yi)] + Pw[np.ix_(xi, yr)]
            rhs = Ps[np.ix_(xi, yi)] + Ps[np.ix_(xi, yr)]
            out[a, b] = np.abs(lhs - rhs)
    return out


def heat_kernel_folding_check(x: int, y: int, t: float, p: ModelParams, margin: int = 30):
    """Both sides of the folding identity for the slow-bond walk.

    ``P_x(X_t = y) + P_x(X_t = 1 - y)`` is the same for the slow-bond walk
    and the homogeneous walk with unit bond rates. Both are computed on a
    window symmetric under ``x -> 1 - x``, where the fold stays exact.
    """
    R = max(abs(x), abs(y)) + 1 + margin + int(10 * math.sqrt(t))
    win = _fold_window(R)
    vals = []
    for kind in ("slow1d", "simple1d-rate2"):
        spec = WalkSpec(kind, p.n, p.alpha, x)
        tab = transition_probabilities(spec, t, win, starts=[x])
        vals.append(tab.prob(x, y) + tab.prob(x, 1 - y))
    lhs, rhs = vals
    return lhs, rhs, abs(lhs - rhs)


def _class_matrix(chain: FiniteChain, relation: Callable):
    reps = [relation(u) for u in chain.states]
    reps = [(r,) if np.isscalar(r) else tuple(r) for r in reps]
    classes = sorted(set(reps))
    cidx = {c: i for i, c in enumerate(classes)}
    rows = np.arange(chain.size)
    cols = np.array([cidx[r] for r in reps])
    Mb = sp.csr_matrix((np.ones(chain.size), (rows, cols)), shape=(chain.size, len(classes)))
    return classes, cols, Mb


def check_lumpable(chain: FiniteChain, relation: Callable, tol: float = 1e-12):
    """Brute-force check of the lumping condition.

    For every class ``c`` and every pair ``x ~ x'`` the total rate from
    ``x`` into ``c`` must equal that from ``x'`` (own class included).
    Returns the classes and the lumped rate matrix; raises
    :class:`LumpingError` naming the first offending pair.
    """
    classes, cols, Mb = _class_matrix(chain, relation)
    off = chain.Q - sp.diags(chain.Q.diagonal())
    agg = (off @ Mb).toarray()
    first = {}
    for i, c in enumerate(cols):
        if c not in first:
            first[c] = i
            continue
        j = first[c]
        bad = np.nonzero(np.abs(agg[i] - agg[j]) > tol)[0]
        if bad.size:
            raise LumpingError(
                f"states {chain.states[j]} ~ {chain.states[i]} have rates "
                f"{agg[j, bad[0]]:.6g} != {agg[i, bad[0]]:.6g} into class {classes[bad[0]]}")
    rep_rows = np.array([first[c] for c in range(len(classes))])
    return classes, agg[rep_rows]


def lumping_check(fine: WalkSpec, relation: Callable, coarse: WalkSpec, t: float,
                  fine_window, coarse_window) -> float:
    """Max over starts and classes of ``|P_fine(x -> class) - P_coarse([x] -> class)|``.

    ``relation`` maps a fine state to its class, labelled by the coarse
    state representing it. The lumping condition is verified first.
    """
    fchain = build_chain(fine, fine_window)
    classes, lumped = check_lumpable(fchain, relation)
    cchain = build_chain(coarse, coarse_window)
    missing = [c for c in classes if c not in cchain.index]
    if missing:
        raise LumpingError(f"classes {missing[:3]} are not states of the coarse chain")
    _, cols, Mb = _class_matrix(fchain, relation)
    Pf = _propagate(fchain, t) @ Mb
    Pf = np.asarray(Pf)
    Pc = _propagate(cchain, t)
    order = np.array([cchain.index[c] for c in classes])
    Pc_rows = Pc[np.ix_(order[cols], order)]
    return float(np.abs(Pf - Pc_rows).max())


# ---------------------------------------------------------------------------
# Generic chains: rate comparison
# ---------------------------------------------------------------------------

@numba.njit(cache=True)
def _run_chain(indptr, indices, cum, lam, start, t, in_a, seeds):
    M = seeds.shape[0]
    local = np.zeros(M)
    final = np.zeros(M, np.int64)
    for r in range(M):
        np.random.seed(seeds[r])
        s = start
        now = 0.0
        while now < t:
            if lam[s] > 0.0:
                h = np.random.exponential(1.0 / lam[s])
            else:
                h = np.inf
            if in_a[s]:
                local[r] += min(h, t - now)
            now += h
            if now >= t:
                break
            u = np.random.random()
            k = indptr[s]
            while k < indptr[s + 1] - 1 and cum[k] <= u:
                k += 1
            s = indices[k]
        final[r] = s
    return local, final


def simulate_chain(P: np.ndarray, lam: np.ndarray, start: int, t: float, A, replicas: int,
                   seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Chain built from a skeleton ``P`` and holding rates ``lam``.

    Returns per-replica local times of ``A`` and final states.
    """
    P = sp.csr_matrix(np.asarray(P, float))
    P.sort_indices()
    lam = np.asarray(lam, float)
    cum = np.empty_like(P.data)
    for i in range(P.shape[0]):
        a, b = P.indptr[i], P.indptr[i + 1]
        cum[a:b] = np.cumsum(P.data[a:b])
    in_a = np.zeros(P.shape[0], np.bool_)
    in_a[list(A)] = True
    seeds = replica_seeds(seed, replicas)
    return _run_chain(P.indptr.astype(np.int64), P.indices.astype(np.int64), cum, lam,
                      int(start), float(t), in_a, seeds)


def rate_monotonicity_check(P, slow_rates, fast_rates, A, t: float, replicas: int = 10_000,
                            seed: int = 0, start: int = 0) -> dict:
    """Compare the faster chain at time ``t`` with the slower at ``Lambda t``.

    Both chains share the skeleton ``P``; ``Lambda = sup fast / slow``.
    The check passes when the fast mean does not exceed the slow mean by
    more than the combined 3-sigma half-width.
    """
    slow_rates = np.asarray(slow_rates, float)
    fast_rates = np.asarray(fast_rates, float)
    Lam = float(np.max(fast_rates / slow_rates))
    lf, _ = simulate_chain(P, fast_rates, start, t, A, replicas, seed)
    ls, _ = simulate_chain(P, slow_rates, start, Lam * t, A, replicas, seed + 1)
    mf, hf = mean_ci(lf)
    ms, hs = mean_ci(ls)
    return {
        "fast_mean": mf, "fast_ci": hf, "slow_mean": ms, "slow_ci": hs, "Lambda": Lam,
        "holds": bool(mf <= ms + math.hypot(hf, hs)),
    }


# ---------------------------------------------------------------------------
# Local-time tables and occupation integrals
# ---------------------------------------------------------------------------

@dataclass
class LocalTimeRow:
    n: int
    t: float
    alpha: float
    start: tuple
    target: str
    estimate: float
    ci_half_width: float
    normalized: float

    def csv_row(self):
        return (self.n, self.t, self.alpha, self.start[0], self.start[1], self.estimate,
                self.ci_half_width, self.normalized)


def local_time_bounds_2d(p: ModelParams, t: float, starts, replicas: int = 10_000,
                         seed: int = 0) -> list[LocalTimeRow]:
    """Local times of ``D \\ {(0, 1)}`` and of ``(0, 1)`` up to ``t n^2``.

    Normalized by ``n sqrt(t)`` and ``log(t n^2)`` respectively. ``t`` is
    macroscopic.
    """
    rows = []
    horizon = t * p.n ** 2
    targets = (Target("upper_diagonal"), Target("vertex"))
    for start in starts:
        spec = WalkSpec.from_params("slow2d", p, tuple(start))
        ens = simulate_walks(spec, horizon, targets, replicas, seed)
        for j, (name, norm) in enumerate((("upper_diagonal", p.n * math.sqrt(t)),
                                          ("vertex", math.log(horizon) if horizon > 1 else float("nan")))):
            m, h = ens.mean_ci(j)
            est_norm = m / norm if t > 0 else 0.0
            rows.append(LocalTimeRow(p.n, t, p.alpha, spec.start, name, m, h, est_norm))
    return rows


def write_local_time_csv(path, rows: Sequence[LocalTimeRow]) -> None:
    write_csv(path, ["n", "t", "alpha", "start_x", "start_y", "estimate", "ci_half_width", "normalized"],
              (r.csv_row() for r in rows))


def _target_indices(chain: FiniteChain, target) -> np.ndarray:
    """States of ``chain`` in ``target``: a Target, one site, or a list/set of sites."""
    if isinstance(target, Target):
        return np.array([i for i, u in enumerate(chain.states) if target.contains(u)], dtype=np.int64)
    if np.isscalar(target) or (isinstance(target, tuple) and all(np.isscalar(v) for v in target)):
        target = [target]
    sel = []
    for s in target:
        s = (s,) if np.isscalar(s) else tuple(s)
        if s in chain.index:
            sel.append(chain.index[s])
    return np.array(sel, dtype=np.int64)


def _grid_masses(chain: FiniteChain, QT, v0, b, L: float, m: int):
    """Target mass at the ``m + 1`` times ``k L / m`` and the law at ``L``."""
    if chain.size > _DENSE_LIMIT:
        D = expm_multiply(QT, v0, start=0.0, stop=L, num=m + 1, endpoint=True)
        return D @ b, D[-1]
    E = sla.expm((L / m) * QT.toarray())
    f = np.empty(m + 1)
    v = v0.copy()
    f[0] = v @ b
    for k in range(1, m + 1):
        v = E @ v
        f[k] = v @ b
    return f, v


def _simpson(f, h):
    return h / 3.0 * (f[0] + f[-1] + 4.0 * f[1:-1:2].sum() + 2.0 * f[2:-1:2].sum())


def occupation_integral(spec: WalkSpec, x0, target, t: float, window=None,
                        tol: float = 1e-8, max_levels: int = 12) -> float:
    """``int_0^t P_{x0}[Z_s in target] ds`` by Richardson-refined Simpson.

    ``target`` is a site, a list or set of sites, or a :class:`Target`.
    The time axis is cut into geometrically growing panels so that the
    early transient is resolved; on each panel the law is propagated on a
    uniform grid and the grid is doubled until successive Richardson
    estimates agree to ``tol`` (relative to the running total).
    """
    if t <= 0:
        return 0.0
    spec = spec.with_start(x0)
    window = spec.default_window(t) if window is None else window
    chain = build_chain(spec, window)
    sel = _target_indices(chain, target)
    if sel.size == 0:
        return 0.0
    b = np.zeros(chain.size)
    b[sel] = 1.0
    QT = chain.Q.T.tocsc()
    v = np.zeros(chain.size)
    v[chain.index[spec.start]] = 1.0
    edges = [0.0]
    first = min(t, 0.5)
    while edges[-1] < t:
        edges.append(min(t, max(first, 2.0 * edges[-1])))
    total = 0.0
    for a, c in zip(edges[:-1], edges[1:]):
        L = c - a
        prev = None
        m = 8
        for _ in range(max_levels):
            f, v_end = _grid_masses(chain, QT, v, b, L, m)
            s_h = _simpson(f, L / m)
            s_2h = _simpson(f[::2], 2 * L / m)
            rich = s_h + (s_h - s_2h) / 15.0
            if prev is not None and abs(rich - prev) < tol * max(1.0, total + rich) / len(edges):
                break
            prev = rich
            m *= 2
        else:
            raise RuntimeError(f"occupation integral did not converge on [{a}, {c}]")
        total += rich
        v = v_end
    return float(total)


def occupation_integral_spectral(spec: WalkSpec, x0, target, t: float, window=None) -> float:
    """Closed-form time integral through the eigenvectors of a symmetric generator."""
    if t <= 0:
        return 0.0
    spec = spec.with_start(x0)
    window = spec.default_window(t) if window is None else window
    chain = build_chain(spec, window)
    if not chain.is_symmetric(1e-14):
        raise ValueError("spectral route needs a symmetric generator")
    sel = _target_indices(chain, target)
    lam, V = np.linalg.eigh(chain.Q.toarray())
    z = lam * t
    w = np.where(np.abs(z) > 1e-12, np.expm1(z) / np.where(lam == 0, 1.0, lam), t * (1 + z / 2))
    i0 = chain.index[spec.start]
    return float(V[i0] @ (w * V[sel].sum(axis=0)))
