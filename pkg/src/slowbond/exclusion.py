"""Kinetic Monte Carlo for the exclusion process with a slow bond.

Only effective swaps are sampled: a bond whose two sites agree cannot
change the configuration, so the kernel keeps the list of discordant
normal bonds (with a position map for O(1) removal) and the discordance
of the slow bond. With ``N`` discordant normal bonds and ``s`` in {0, 1}
for the slow bond the total rate is ``n^2 (N + (alpha / n) s)``.

Alongside the configuration the kernel carries, for every registered
test function ``f``,

* ``F = sum_x f(x/n) eta(x)``,
* ``S = sum_x c(x) eta(x)`` with ``c = n^2 A_n f(./n)`` on the window, and
  its exact time integral (``S`` is constant between events),
* the quadratic-variation rate ``q = n sum_b xi_b (eta_x - eta_{x+1})^2
  (f((x+1)/n) - f(x/n))^2`` and its time integral.

The martingale is ``M_t = (F_t - F_0 - int_0^t S ds) / sqrt(n)``. Because
``A_n`` is symmetric, the deterministic centering terms cancel exactly.
"""
from __future__ import annotations

import math
import subprocess
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numba
import numpy as np

from . import __version__
from .io import write_csv, write_json_atomic
from .lattice import ModelParams, Window1D, bond_rates, generator_matrix_1d
from .moments import InitialProfile, MeanField, evolve_mean
from .rng import replica_seeds

__all__ = [
    "Configuration",
    "Trajectory",
    "ReplicaEnsemble",
    "sample_initial",
    "sample_initial_batch",
    "run",
    "run_ensemble",
    "empirical_mean",
    "empirical_correlation",
    "density_field",
    "density_field_samples",
    "field_truncation_bound",
    "martingale_and_qv",
    "solver_means",
    "boundary_influence",
    "recompute_integrals",
    "write_snapshots",
    "tool_version",
]


@dataclass
class Configuration:
    """Occupation variables on a window (one byte per site in memory)."""

    window: Window1D
    occupancy: np.ndarray

    def __post_init__(self):
        self.occupancy = np.asarray(self.occupancy, dtype=np.uint8)
        if self.occupancy.shape != (self.window.size,):
            raise ValueError("occupancy does not match the window")
        if np.any(self.occupancy > 1):
            raise ValueError("occupancies must be 0 or 1")

    @property
    def particles(self) -> int:
        return int(self.occupancy.sum())

    def packed(self) -> bytes:
        return np.packbits(self.occupancy).tobytes()

    @classmethod
    def from_packed(cls, window: Window1D, data: bytes) -> "Configuration":
        bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8))[:window.size]
        return cls(window, bits)


@dataclass
class Trajectory:
    """Snapshots of one run plus its event log (bounded by ``event_cap``)."""

    window: Window1D
    params: ModelParams
    snapshot_times: np.ndarray
    snapshots: np.ndarray          # (S, m) uint8
    event_times: np.ndarray
    event_bonds: np.ndarray        # left site of the swapped bond
    events: int
    initial: Configuration
    final: Configuration
    seed: int = 0

    @property
    def log_complete(self) -> bool:
        return self.event_times.size == self.events


@dataclass
class ReplicaEnsemble:
    """Independent replicas sharing window, parameters and snapshot times."""

    window: Window1D
    params: ModelParams
    snapshot_times: np.ndarray
    snapshots: np.ndarray          # (M, S, m) uint8
    F: np.ndarray                  # (M, K, S)
    integral: np.ndarray           # (M, K, S)
    qv: np.ndarray                 # (M, K, S)
    events: np.ndarray             # (M,)
    conserved: np.ndarray          # (M,) bool
    seed: int
    functions: tuple = ()
    coef: np.ndarray = field(default=None, repr=False)

    @property
    def replicas(self) -> int:
        return self.snapshots.shape[0]

    def time_index(self, t: float) -> int:
        k = np.nonzero(np.isclose(self.snapshot_times, t, rtol=0, atol=1e-12))[0]
        if k.size == 0:
            raise KeyError(f"no snapshot at t={t}; available {self.snapshot_times.tolist()}")
        return int(k[0])


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

@numba.njit(cache=True)
def _sample_bernoulli(rho, seeds):
    M = seeds.shape[0]
    m = rho.shape[0]
    out = np.zeros((M, m), np.uint8)
    for r in range(M):
        np.random.seed(seeds[r])
        for i in range(m):
            if np.random.random() < rho[i]:
                out[r, i] = 1
    return out


@numba.njit(cache=True)
def _set_disc(j, on, disc, pos, nd):
    if on:
        if pos[j] < 0:
            pos[j] = nd
            disc[nd] = j
            nd += 1
    else:
        k = pos[j]
        if k >= 0:
            last = disc[nd - 1]
            disc[k] = last
            pos[last] = k
            pos[j] = -1
            nd -= 1
    return nd


@numba.njit(cache=True)
def _run_kernel(init, rho, sample, n, slow, b0, t_end, snaps, fv, cv, wq, seeds, cap):
    M = seeds.shape[0]
    m = init.shape[1]
    nb = m - 1
    K = fv.shape[0]
    S = snaps.shape[0]
    n2 = float(n) * float(n)
    out_snap = np.zeros((M, S, m), np.uint8)
    out_F = np.zeros((M, K, S))
    out_I = np.zeros((M, K, S))
    out_Q = np.zeros((M, K, S))
    n_events = np.zeros(M, np.int64)
    conserved = np.zeros(M, np.bool_)
    log_t = np.zeros(cap)
    log_b = np.zeros(cap, np.int64)
    n_log = 0
    disc = np.zeros(nb, np.int64)
    pos = np.zeros(nb, np.int64)
    eta = np.zeros(m, np.uint8)
    Fk = np.zeros(K)
    Sk = np.zeros(K)
    Ik = np.zeros(K)
    Qr = np.zeros(K)
    Qk = np.zeros(K)
    for r in range(M):
        np.random.seed(seeds[r])
        if sample:
            for i in range(m):
                eta[i] = 1 if np.random.random() < rho[i] else 0
        else:
            for i in range(m):
                eta[i] = init[r, i]
        count0 = 0
        for i in range(m):
            count0 += eta[i]
        nd = 0
        for j in range(nb):
            pos[j] = -1
        for j in range(nb):
            if j != b0 and eta[j] != eta[j + 1]:
                nd = _set_disc(j, True, disc, pos, nd)
        sd = 1 if eta[b0] != eta[b0 + 1] else 0
        for k in range(K):
            Fk[k] = 0.0
            Sk[k] = 0.0
            Ik[k] = 0.0
            Qk[k] = 0.0
            Qr[k] = 0.0
            for i in range(m):
                if eta[i]:
                    Fk[k] += fv[k, i]
                    Sk[k] += cv[k, i]
            for j in range(nb):
                if eta[j] != eta[j + 1]:
                    Qr[k] += wq[k, j]
        now = 0.0
        si = 0
        ev = 0
        while True:
            tot = float(nd) + slow * sd
            if tot > 0.0:
                h = np.random.exponential(1.0 / (n2 * tot))
            else:
                h = np.inf
            tn = now + h
            while si < S and snaps[si] <= tn:
                dt = snaps[si] - now
                for k in range(K):
                    Ik[k] += Sk[k] * dt
                    Qk[k] += Qr[k] * dt
                    out_F[r, k, si] = Fk[k]
                    out_I[r, k, si] = Ik[k]
                    out_Q[r, k, si] = Qk[k]
                for i in range(m):
                    out_snap[r, si, i] = eta[i]
                now = snaps[si]
                si += 1
            if tn > t_end:
                break
            dt = tn - now
            for k in range(K):
                Ik[k] += Sk[k] * dt
                Qk[k] += Qr[k] * dt
            now = tn
            u = np.random.random() * tot
            if u < nd:
                j = disc[min(int(u), nd - 1)]
            else:
                j = b0
            # swap the discordant pair (j, j + 1)
            a = eta[j]
            eta[j] = eta[j + 1]
            eta[j + 1] = a
            d = float(eta[j + 1]) - float(eta[j])  # change at j + 1
            for k in range(K):
                Fk[k] += d * (fv[k, j + 1] - fv[k, j])
                Sk[k] += d * (cv[k, j + 1] - cv[k, j])
            for jj in (j - 1, j + 1):
                if jj < 0 or jj >= nb:
                    continue
                on = eta[jj] != eta[jj + 1]
                if jj == b0:
                    was = sd == 1
                    sd = 1 if on else 0
                else:
                    was = pos[jj] >= 0
                    nd = _set_disc(jj, on, disc, pos, nd)
                if on != was:
                    sgn = 1.0 if on else -1.0
                    for k in range(K):
                        Qr[k] += sgn * wq[k, jj]
            ev += 1
            if r == 0 and n_log < cap:
                log_t[n_log] = now
                log_b[n_log] = j
                n_log += 1
        count1 = 0
        for i in range(m):
            count1 += eta[i]
        conserved[r] = count0 == count1
        n_events[r] = ev
    return out_snap, out_F, out_I, out_Q, n_events, conserved, log_t[:n_log], log_b[:n_log]


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------

def _profile_values(profile, window: Window1D, n: int) -> np.ndarray:
    if isinstance(profile, MeanField):
        return profile.restrict(window).values
    if isinstance(profile, InitialProfile):
        return profile.sample(window, n)
    vals = np.asarray(profile(window.sites / n), dtype=float)
    if np.any(vals < 0) or np.any(vals > 1):
        raise ValueError("profile leaves [0, 1]")
    return vals


def sample_initial(profile, window: Window1D, n: int, seed: int = 0, replica: int = 0) -> Configuration:
    """Independent Bernoulli occupations with means ``rho0(x / n)``."""
    rho = _profile_values(profile, window, n)
    seeds = replica_seeds(seed, 1, replica)
    return Configuration(window, _sample_bernoulli(rho, seeds)[0])


def sample_initial_batch(profile, window: Window1D, n: int, replicas: int, seed: int = 0,
                         offset: int = 0) -> np.ndarray:
    """Occupations of replicas ``offset .. offset + replicas - 1``, shape ``(replicas, sites)``."""
    rho = _profile_values(profile, window, n)
    return _sample_bernoulli(rho, replica_seeds(seed, replicas, offset))


def _function_tables(functions, window: Window1D, p: ModelParams):
    """Values, drift coefficients and QV bond weights of each test function."""
    n = p.n
    u = window.sites / n
    K = len(functions)
    fv = np.zeros((K, window.size))
    for k, f in enumerate(functions):
        fv[k] = f(u)
    A = generator_matrix_1d(window, p)
    cv = (n * n) * np.asarray((A @ fv.T).T)
    xi = bond_rates(window, p)
    wq = n * xi[None, :] * np.diff(fv, axis=1) ** 2
    return fv, cv.reshape(K, window.size), wq.reshape(K, window.size - 1)


def _snap_array(snapshot_times, t_end):
    s = np.unique(np.asarray(sorted(set(float(v) for v in snapshot_times)), dtype=float))
    if s.size and (s[0] < 0 or s[-1] > t_end + 1e-15):
        raise ValueError("snapshot times must lie in [0, t_end]")
    return s


def run(config: Configuration, p: ModelParams, t_end: float, snapshot_times=(), seed: int = 0,
        event_cap: int = 1_000_000) -> Trajectory:
    """Simulate one trajectory from ``config`` on its (closed) window.

    ``t_end`` is macroscopic; bonds ring at ``n^2`` times their rate.
    """
    if t_end > p.T + 1e-12:
        raise ValueError(f"t_end={t_end} exceeds the horizon T={p.T}")
    w = config.window
    snaps = _snap_array(snapshot_times, t_end)
    fv = np.zeros((0, w.size))
    wq = np.zeros((0, w.size - 1))
    out = _run_kernel(config.occupancy[None, :].copy(), np.zeros(w.size), False, p.n, p.slow_rate,
                      w.bond_index, float(t_end), snaps, fv, fv, wq, replica_seeds(seed, 1), int(event_cap))
    snap, _, _, _, events, conserved, lt, lb = out
    if not conserved[0]:  # pragma: no cover - guarded by construction
        raise RuntimeError("particle number changed")
    final = config.occupancy.copy()
    for b in lb:
        final[b], final[b + 1] = final[b + 1], final[b]
    fin = Configuration(w, final) if lt.size == events[0] else None
    return Trajectory(w, p, snaps, snap[0], lt, lb + w.lo, int(events[0]), config, fin, seed)


def run_ensemble(profile, p: ModelParams, window: Window1D, t_end: float, snapshot_times,
                 replicas: int, seed: int = 0, functions: Sequence = (),
                 initial: np.ndarray | None = None) -> ReplicaEnsemble:
    """Independent replicas from a product initial law (or given configurations).

    ``functions`` are callables of the macroscopic variable whose fields,
    martingales and quadratic variations are tracked exactly.
    """
    if t_end > p.T + 1e-12:
        raise ValueError(f"t_end={t_end} exceeds the horizon T={p.T}")
    snaps = _snap_array(snapshot_times, t_end)
    functions = tuple(functions)
    fv, cv, wq = _function_tables(functions, window, p)
    seeds = replica_seeds(seed, replicas)
    if initial is None:
        rho = _profile_values(profile, window, p.n)
        init = np.zeros((1, window.size), np.uint8)
        sample = True
    else:
        init = np.asarray(initial, np.uint8)
        rho = np.zeros(window.size)
        sample = False
    snap, F, I, Q, events, conserved, _, _ = _run_kernel(
        init, rho, sample, p.n, p.slow_rate, window.bond_index, float(t_end), snaps, fv, cv, wq, seeds, 0)
    return ReplicaEnsemble(window, p, snaps, snap, F, I, Q, events, conserved, seed, functions, fv)


def empirical_mean(ens: ReplicaEnsemble, t: float, sites, sigmas: float = 3.0):
    """Per-site sample means and ``sigmas``-standard-error half-widths."""
    k = ens.time_index(t)
    idx = [ens.window.index(x) for x in sites]
    X = ens.snapshots[:, k, idx].astype(float)
    M = X.shape[0]
    return X.mean(axis=0), sigmas * X.std(axis=0, ddof=1) / math.sqrt(M)


def empirical_correlation(ens: ReplicaEnsemble, t: float, pairs, rho: MeanField, sigmas: float = 3.0):
    """``mean(eta_x eta_y) - rho_t(x) rho_t(y)`` centred with the solver's mean."""
    k = ens.time_index(t)
    vals, half = [], []
    M = ens.replicas
    for x, y in pairs:
        a = ens.snapshots[:, k, ens.window.index(x)].astype(float)
        b = ens.snapshots[:, k, ens.window.index(y)].astype(float)
        prod = a * b
        vals.append(prod.mean() - rho(x) * rho(y))
        half.append(sigmas * prod.std(ddof=1) / math.sqrt(M))
    return np.array(vals), np.array(half)


def solver_means(profile, p: ModelParams, window: Window1D, times) -> dict:
    """Deterministic means ``rho_t^n`` on ``window`` at each requested time.

    Used to centre the empirical fields; the solver runs on the same
    closed window as the simulation.
    """
    out = {}
    cur = MeanField(window, _profile_values(profile, window, p.n), 0.0)
    for t in sorted(set(float(v) for v in times)):
        cur = evolve_mean(cur, p, t - cur.time) if t > cur.time else cur
        out[t] = cur
    return out


def boundary_influence(profile, p: ModelParams, window: Window1D, t: float, sites) -> float:
    """Largest change of the solver mean at ``sites`` when the window is doubled."""
    big = Window1D(2 * window.lo, 2 * window.hi)
    a = solver_means(profile, p, window, [t])[t]
    b = solver_means(profile, p, big, [t])[t]
    return float(max(abs(a(x) - b(x)) for x in sites))


def field_truncation_bound(f, window: Window1D, n: int) -> float:
    """Bound on the part of the density field lost outside the window.

    Sums ``|f(x/n)|`` explicitly out to ``|x| = n U`` and bounds the
    remainder with ``sup_{|u| >= U} (1 + u^2) |f(u)|``, the weighted sup
    defining the ``(0, 2)`` decay norm. ``U`` is pushed out until that
    tail term is negligible.
    """
    U = max(getattr(f, "extent", 10.0) + 1.0, -window.lo / n, window.hi / n)
    if hasattr(f, "tail_bound"):
        # push the cut-off out until the analytic tail is negligible
        while f.tail_bound(U, 0, 2) * 2 * n / U > 1e-18 and U < 1e4:
            U *= 1.25
    X = int(math.ceil(n * U))
    right = np.arange(window.hi + 1, max(window.hi + 1, X) + 1)
    left = np.arange(min(window.lo - 1, -X), window.lo)
    s = float(np.abs(f(right / n)).sum() + np.abs(f(left / n)).sum())
    if hasattr(f, "tail_bound"):
        tail_sup = f.tail_bound(U, 0, 2)
    else:
        uu = np.linspace(U, 4 * U, 2001)
        tail_sup = float(max(((1 + uu ** 2) * np.abs(f(uu))).max(), ((1 + uu ** 2) * np.abs(f(-uu))).max()))
    # sum_{|x| > nU} 1 / (1 + (x/n)^2) <= 2 n / U
    s += tail_sup * 2 * n / U
    return s / math.sqrt(n)


def density_field(config: Configuration, f, rho: MeanField, p: ModelParams, warn_above: float = 1e-8) -> float:
    """``n^{-1/2} sum_x f(x/n) (eta(x) - rho(x))`` over the window."""
    w = config.window
    r = rho.restrict(w).values if rho.window != w else rho.values
    bound = field_truncation_bound(f, w, p.n)
    if bound > warn_above:
        warnings.warn(f"density field truncation bound {bound:.2e} exceeds {warn_above:.0e}")
    return float(np.dot(f(w.sites / p.n), config.occupancy - r) / math.sqrt(p.n))


def density_field_samples(ens: ReplicaEnsemble, t: float, f, rho: MeanField | np.ndarray) -> np.ndarray:
    """Field ``Y_t(f)`` for every replica at snapshot time ``t``."""
    k = ens.time_index(t)
    w = ens.window
    r = rho.restrict(w).values if isinstance(rho, MeanField) else np.asarray(rho, float)
    fx = f(w.sites / ens.params.n)
    X = ens.snapshots[:, k, :].astype(float) - r[None, :]
    return X @ fx / math.sqrt(ens.params.n)


def martingale_and_qv(ens: ReplicaEnsemble, j: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """``(M, QV)`` arrays of shape ``(replicas, snapshots)`` for function ``j``."""
    n = ens.params.n
    F = ens.F[:, j, :]
    M = (F - F[:, :1] - ens.integral[:, j, :]) / math.sqrt(n)
    return M, ens.qv[:, j, :].copy()


def recompute_integrals(traj: Trajectory, f, reverse: bool = False) -> tuple[float, float]:
    """Drift and QV integrals up to the last snapshot, rebuilt from the event log.

    Pieces are summed with ``math.fsum``; ``reverse`` accumulates them in
    the opposite order. Requires a complete log.
    """
    if not traj.log_complete:
        raise ValueError("event log was truncated")
    w = traj.window
    fv, cv, wq = _function_tables((f,), w, traj.params)
    c, q = cv[0], wq[0]
    t_end = float(traj.snapshot_times[-1])
    eta = traj.initial.occupancy.astype(float).copy()
    S = float(c @ eta)
    Qr = float(q @ (np.diff(eta) != 0))
    pieces_i, pieces_q = [], []
    now = 0.0
    for tm, b in zip(traj.event_times, traj.event_bonds - w.lo):
        if tm > t_end:
            break
        pieces_i.append(S * (tm - now))
        pieces_q.append(Qr * (tm - now))
        now = tm
        eta[b], eta[b + 1] = eta[b + 1], eta[b]
        S = float(c @ eta)
        Qr = float(q @ (np.diff(eta) != 0))
    pieces_i.append(S * (t_end - now))
    pieces_q.append(Qr * (t_end - now))
    if reverse:
        pieces_i.reverse()
        pieces_q.reverse()
    return math.fsum(pieces_i), math.fsum(pieces_q)


def tool_version() -> str:
    """Package version plus ``git describe`` output when available."""
    try:
        d = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                           text=True, timeout=5, cwd=Path(__file__).parent)
        if d.returncode == 0 and d.stdout.strip():
            return f"{__version__}+{d.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_snapshots(directory, ens: ReplicaEnsemble, stem: str = "snapshots") -> list[Path]:
    """Bit-packed occupations, per-site means CSV and a JSON sidecar."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    binp = d / f"{stem}.bin"
    binp.write_bytes(np.packbits(ens.snapshots, axis=-1).tobytes())
    means = ens.snapshots.mean(axis=0)
    csvp = write_csv(d / f"{stem}_means.csv", ["t", "x", "value"],
                     ((float(t), int(x), float(v)) for t, row in zip(ens.snapshot_times, means)
                      for x, v in zip(ens.window.sites, row)))
    side = write_json_atomic(d / f"{stem}.json", {
        "version": tool_version(), "seed": ens.seed, "n": ens.params.n, "alpha": ens.params.alpha,
        "T": ens.params.T, "window": [ens.window.lo, ens.window.hi], "replicas": ens.replicas,
        "snapshot_times": ens.snapshot_times.tolist(), "shape": list(ens.snapshots.shape),
        "encoding": "numpy.packbits along the site axis, big-endian bit order",
    })
    return [binp, csvp, side]
