"""Fluctuation statistics against their Gaussian (Ornstein-Uhlenbeck) predictions.

Everything here is post-processing of :class:`~slowbond.exclusion.ReplicaEnsemble`
data plus deterministic evaluations from :mod:`slowbond.robin`.
"""
from __future__ import annotations

import functools
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy import integrate, stats

from .exclusion import ReplicaEnsemble, density_field_samples, martingale_and_qv
from .io import write_csv, write_json_atomic
from .lattice import ModelParams, Window1D
from .moments import MeanField
from .robin import MacroProfile, TestFunction, apply_semigroup, ou_norm_sq, ou_variance

__all__ = [
    "FluctuationSample",
    "PredictionBundle",
    "CLTResult",
    "QVReport",
    "OUReport",
    "collect_samples",
    "normality_pvalue",
    "initial_field_clt",
    "predicted_initial_covariance",
    "polarization_check",
    "remainder_coefficient",
    "remainder_window",
    "qv_prediction",
    "qv_convergence",
    "ou_conditional_check",
    "write_report",
]


@dataclass
class FluctuationSample:
    """Field values per replica for a grid of ``(t, name)`` cells."""

    replicas: np.ndarray
    values: dict = field(default_factory=dict)      # (t, name) -> (M,)
    martingale: np.ndarray | None = None            # (M, S)
    qv: np.ndarray | None = None                    # (M, S)

    def __post_init__(self):
        M = self.replicas.size
        for key, v in self.values.items():
            v = np.asarray(v, dtype=float)
            if v.shape != (M,):
                raise ValueError(f"cell {key} has shape {v.shape}, expected ({M},)")
            if not np.all(np.isfinite(v)):
                raise ValueError(f"cell {key} has non-finite values")
            self.values[key] = v

    def __getitem__(self, key):
        return self.values[key]


def collect_samples(ens: ReplicaEnsemble, fields: Mapping[str, Callable], times,
                    rho: Mapping[float, MeanField], j: int | None = 0) -> FluctuationSample:
    """Evaluate every field at every time, centred with the solver means ``rho``."""
    vals = {}
    for t in times:
        for name, f in fields.items():
            vals[(float(t), name)] = density_field_samples(ens, t, f, rho[float(t)])
    M = Q = None
    if j is not None and ens.F.shape[1] > j:
        M, Q = martingale_and_qv(ens, j)
    return FluctuationSample(np.arange(ens.replicas), vals, M, Q)


@dataclass
class PredictionBundle:
    """Conditional-law predictions for ``Y_t(f)`` given the field at ``s``."""

    f: TestFunction
    macro: MacroProfile
    include_atom: bool = True
    _var: dict = field(default_factory=dict, repr=False)

    def conditional_map(self, s: float, t: float) -> Callable:
        """``u -> T_{t-s} f(u)``: the test function paired with ``Y_s``."""
        if t == s:
            return self.f
        return functools.partial(_semigroup_at, self.f, t - s)

    def variance(self, s: float, t: float, shift: float = 0.0) -> float:
        key = (s, t, shift)
        if key not in self._var:
            v = ou_variance(self.f, s, t, self.macro, shift=shift, include_atom=self.include_atom)
            if v < 0:
                raise ValueError("negative conditional variance")
            self._var[key] = v
        return self._var[key]

    def additivity_gap(self, s: float, u: float, t: float) -> float:
        """``|var(s, u; T_{t-u} f) + var(u, t) - var(s, t)|``."""
        return abs(self.variance(s, u, shift=t - u) + self.variance(u, t) - self.variance(s, t))


def _semigroup_at(f, tau, u):
    return apply_semigroup(f, tau, u, f.alpha)


# ---------------------------------------------------------------------------
# normality
# ---------------------------------------------------------------------------

@functools.lru_cache(maxsize=32)
def _ad_null(size: int, draws: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.sort([stats.anderson(rng.standard_normal(size), "norm").statistic for _ in range(draws)])


def normality_pvalue(x, draws: int = 400, seed: int = 12345) -> tuple[float, float]:
    """Anderson-Darling statistic with a simulated p-value.

    The statistic uses estimated mean and scale, so its null law does not
    depend on them; it is sampled from ``draws`` standard normal sets of
    the same size.
    """
    x = np.asarray(x, dtype=float)
    if x.size < 8:
        raise ValueError("need at least 8 samples")
    if np.ptp(x) == 0:
        return float("nan"), float("nan")
    a2 = float(stats.anderson(x, "norm").statistic)
    null = _ad_null(x.size, draws, seed)
    exceed = null.size - np.searchsorted(null, a2, side="left")
    return a2, (1.0 + exceed) / (null.size + 1.0)


# ---------------------------------------------------------------------------
# initial field
# ---------------------------------------------------------------------------

@dataclass
class CLTResult:
    name: str
    mean: float
    variance: float
    predicted: float
    rel_error: float
    ad_statistic: float
    p_value: float
    replicas: int

    @property
    def passed(self) -> bool:
        ok_var = self.rel_error <= 0.05 if self.predicted > 0 else self.variance == 0
        ok_norm = math.isnan(self.p_value) or self.p_value >= 0.01
        return bool(ok_var and ok_norm)


def _split_quad(func, U: float) -> float:
    a = integrate.quad(func, -U, 0.0, limit=400, epsabs=1e-13, epsrel=1e-11)[0]
    b = integrate.quad(func, 0.0, U, limit=400, epsabs=1e-13, epsrel=1e-11)[0]
    return a + b


def predicted_initial_covariance(f, g, rho0: Callable, U: float | None = None) -> float:
    """``int chi(rho0(u)) f(u) g(u) du``, split at the interface."""
    if U is None:
        U = max(getattr(f, "extent", 12.0), getattr(g, "extent", 12.0))

    def integrand(u):
        r = float(rho0(u))
        return r * (1 - r) * float(f(u)) * float(g(u))

    return _split_quad(integrand, U)


def initial_field_clt(samples: FluctuationSample | ReplicaEnsemble, functions: Mapping[str, Callable],
                      rho0: Callable, rho: MeanField | None = None, t: float = 0.0) -> list[CLTResult]:
    """Moments and normality of ``Y_0(f)`` under the product initial law."""
    out = []
    for name, f in functions.items():
        if isinstance(samples, ReplicaEnsemble):
            r = rho if rho is not None else MeanField(samples.window,
                                                      np.asarray(rho0(samples.window.sites / samples.params.n)),
                                                      0.0)
            y = density_field_samples(samples, t, f, r)
        else:
            y = samples[(float(t), name)]
        pred = predicted_initial_covariance(f, f, rho0)
        var = float(y.var(ddof=1))
        a2, pv = normality_pvalue(y)
        rel = abs(var - pred) / pred if pred > 0 else float("inf") if var > 0 else 0.0
        out.append(CLTResult(name, float(y.mean()), var, pred, rel, a2, pv, int(y.size)))
    return out


def polarization_check(yf, yg, yfpg, yfmg, sigmas: float = 3.0) -> tuple[float, float, float]:
    """``(Var(f+g) - Var(f-g), 4 Cov(f, g), sigmas * standard error)``."""
    yf, yg, yfpg, yfmg = (np.asarray(v, float) for v in (yf, yg, yfpg, yfmg))
    lhs = yfpg.var(ddof=1) - yfmg.var(ddof=1)
    rhs = 4.0 * np.cov(yf, yg, ddof=1)[0, 1]
    prod = (yf - yf.mean()) * (yg - yg.mean())
    se = 4.0 * prod.std(ddof=1) / math.sqrt(yf.size)
    return float(lhs), float(rhs), float(sigmas * se)


# ---------------------------------------------------------------------------
# deterministic remainder
# ---------------------------------------------------------------------------

def remainder_window(f: TestFunction, n: int) -> Window1D:
    """Sites where ``f`` is numerically significant, plus one site of margin."""
    L = int(math.ceil(n * f.extent)) + 2
    return Window1D(-L, L + 1)


def remainder_coefficient(f: TestFunction, p: ModelParams, window: Window1D | None = None) -> float:
    """``n^{-1/2} sum_x |n^2 A_n f(x/n) - f''(x/n)|`` over ``window``.

    Site ``x`` uses the one-sided second derivative from its own side of
    the interface (left for ``x <= 0``). Terms at the window edge use the
    full stencil, so the sum does not see the closed boundary.
    """
    n = p.n
    w = remainder_window(f, n) if window is None else window
    x = np.arange(w.lo - 1, w.hi + 2)
    fx = f(x / n)
    # rates on bonds (x, x+1) for x in [lo-1, hi]
    xi = np.ones(x.size - 1)
    xi[x[:-1] == 0] = p.slow_rate
    d = np.diff(fx) * xi
    gen = (n * n) * (d[1:] - d[:-1])
    xs = x[1:-1]
    lap = np.where(xs <= 0, f.derivative(2, xs / n, "left"), f.derivative(2, xs / n, "right"))
    return float(np.abs(gen - lap).sum() / math.sqrt(n))


# ---------------------------------------------------------------------------
# quadratic variation
# ---------------------------------------------------------------------------

@dataclass
class QVReport:
    mean_qv: float
    predicted: float
    gap: float
    rel_gap: float
    martingale_mean: float
    martingale_ci: float
    variance: float
    variance_gap_ci: float
    replicas: int

    @property
    def passed(self) -> bool:
        return bool(abs(self.martingale_mean) <= self.martingale_ci and self.rel_gap <= 0.10
                    and abs(self.variance - self.mean_qv) <= self.variance_gap_ci)


def qv_prediction(f: TestFunction, macro: MacroProfile, t: float, nodes: int = 16) -> float:
    """``int_0^t || grad f ||^2_{rho_r} dr`` with the interface atom.

    The integrand is ``int 2 chi(rho_r) (f')^2 du + atom_r (f'(0))^2``; the
    atom weight carries the factor ``1/alpha`` (see :class:`WeightedMeasure`).
    """
    if t == 0:
        return 0.0
    x, w = np.polynomial.legendre.leggauss(nodes)
    r = 0.5 * t * (x + 1)
    return float(0.5 * t * sum(wk * ou_norm_sq(f, 0.0, macro, rk) for rk, wk in zip(r, w)))


def qv_convergence(ens: ReplicaEnsemble, f: TestFunction, macro: MacroProfile, t: float, j: int = 0,
                   sigmas: float = 3.0, predicted: float | None = None) -> QVReport:
    """Empirical QV, martingale mean and martingale variance at time ``t``."""
    k = ens.time_index(t)
    M, Q = martingale_and_qv(ens, j)
    m, q = M[:, k], Q[:, k]
    R = m.size
    pred = qv_prediction(f, macro, t) if predicted is None else predicted
    mq = float(q.mean())
    gap = mq - pred
    rel = abs(gap) / pred if pred > 0 else (0.0 if mq == 0 else float("inf"))
    var = float(m.var(ddof=1))
    diff = m * m - q
    return QVReport(mq, pred, gap, rel, float(m.mean()), sigmas * float(m.std(ddof=1)) / math.sqrt(R),
                    var, sigmas * float(diff.std(ddof=1)) / math.sqrt(R), R)


# ---------------------------------------------------------------------------
# conditional law
# ---------------------------------------------------------------------------

@dataclass
class OUReport:
    slope: float
    slope_ci: float
    intercept: float
    residual_variance: float
    predicted_variance: float
    predicted_no_atom: float
    rel_error: float
    ad_statistic: float
    p_value: float
    replicas: int

    @property
    def passed(self) -> bool:
        ok_slope = abs(self.slope - 1.0) <= self.slope_ci
        ok_var = self.rel_error <= 0.15
        ok_norm = math.isnan(self.p_value) or self.p_value >= 0.01
        return bool(ok_slope and ok_var and ok_norm)


def ou_conditional_check(ens: ReplicaEnsemble, f: TestFunction, s: float, t: float, macro: MacroProfile,
                         rho: Mapping[float, MeanField], sigmas: float = 3.0,
                         ablation: bool = False) -> OUReport:
    """Regress ``Y_t(f)`` on ``Y_s(T_{t-s} f)`` across replicas.

    ``rho`` maps ``s`` and ``t`` to the solver means used for centring.
    With ``ablation`` the prediction without the interface atom is also
    computed.
    """
    bundle = PredictionBundle(f, macro)
    g = bundle.conditional_map(s, t)
    x = density_field_samples(ens, s, g, rho[float(s)])
    y = density_field_samples(ens, t, f, rho[float(t)])
    R = x.size
    pred = bundle.variance(s, t)
    no_atom = ou_variance(f, s, t, macro, include_atom=False) if ablation else float("nan")
    if s == t:
        return OUReport(1.0, 0.0, 0.0, 0.0, pred, no_atom, 0.0, float("nan"), float("nan"), R)
    res = stats.linregress(x, y)
    resid = y - (res.intercept + res.slope * x)
    rv = float(resid.var(ddof=2))
    a2, pv = normality_pvalue(resid)
    rel = abs(rv - pred) / pred if pred > 0 else float("inf")
    return OUReport(float(res.slope), sigmas * float(res.stderr), float(res.intercept), rv, pred, no_atom,
                    rel, a2, pv, R)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def write_report(stem, rows: list, tolerances: Mapping[str, float]) -> list:
    """CSV of report rows plus a JSON summary echoing the tolerances."""
    from pathlib import Path
    stem = Path(stem)
    dicts = [dict(asdict(r), passed=r.passed) for r in rows]
    header = list(dicts[0]) if dicts else ["passed"]
    csvp = write_csv(stem.with_suffix(".csv"), header, ([d[h] for h in header] for d in dicts))
    jp = write_json_atomic(stem.with_suffix(".json"), {
        "tolerances": dict(tolerances), "rows": dicts, "passed": all(d["passed"] for d in dicts)})
    return [csvp, jp]
