import itertools
import math

import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings, strategies as st

from slowbond.lattice import ModelParams, Window1D, WindowV, bond_rates
from slowbond.moments import (
    CorrelationField,
    InitialProfile,
    MeanField,
    StabilityError,
    correlation_source,
    correlation_sup_scaling,
    discrete_gradient_sup,
    duhamel_mean_check,
    evolve_correlation,
    evolve_mean,
    gradient_square_sups,
    mean_path,
    write_correlation_csv,
    write_mean_csv,
    write_scaling_csv,
)
from slowbond.io import read_csv

TANH = InitialProfile.tanh()


def _field(profile, n, T, reach=0.0):
    p = ModelParams(n, 1.0, T)
    w = Window1D.for_horizon(p, reach)
    return MeanField.from_profile(profile, w, n), p


def test_constant_profile_is_stationary():
    rho0, p = _field(InitialProfile.constant(0.5), 16, 0.2)
    rho = evolve_mean(rho0, p, 0.2)
    assert np.abs(rho.values - 0.5).max() < 1e-14
    run = evolve_correlation(None, rho0, p, 0.05)
    assert run.sup_abs == 0.0


def test_mass_conservation_and_range():
    rho0, p = _field(InitialProfile.step(0.9, 0.05), 16, 0.3)
    rho = evolve_mean(rho0, p, 0.3)
    assert abs(rho.values.sum() - rho0.values.sum()) < 1e-8
    assert rho.values.min() >= -1e-9 and rho.values.max() <= 1 + 1e-9


def test_step_profile_gap_at_slow_bond():
    p = ModelParams(64, 0.1, 0.05)
    w = Window1D.for_horizon(p)
    rho = evolve_mean(MeanField.from_profile(InitialProfile.step(0.5, 0.25), w, 64), p, 0.05)
    assert rho(0) - rho(1) >= 0.05


def test_unstable_step_rejected():
    rho0, p = _field(TANH, 8, 0.1)
    with pytest.raises(StabilityError):
        evolve_mean(rho0, p, 0.1, dt=1.0 / (p.n ** 2))
    with pytest.raises(StabilityError):
        evolve_correlation(None, rho0, p, 0.01, window=WindowV(10), dt=1.0 / (p.n ** 2))


def test_step_halving_accuracy_mean():
    rho0, p = _field(TANH, 32, 0.2)
    a = evolve_mean(rho0, p, 0.2)
    b = evolve_mean(rho0, p, 0.2, cfl=0.125)
    assert np.abs(a.values - b.values).max() < 1e-8


def test_rk4_convergence_order():
    rho0, p = _field(TANH, 8, 0.1)
    ref = evolve_mean(rho0, p, 0.1, cfl=0.02).values
    errs = [np.abs(evolve_mean(rho0, p, 0.1, cfl=c).values - ref).max() for c in (2.0, 1.0, 0.5)]
    orders = [math.log2(errs[i] / errs[i + 1]) for i in range(2)]
    assert all(3.5 < o < 4.5 for o in orders), orders


def test_gradient_sup_examples():
    rho0, p = _field(InitialProfile.constant(0.3), 16, 0.1)
    assert discrete_gradient_sup(mean_path(rho0, p))[0] == 0.0
    rho0, p = _field(InitialProfile.step(0.9, 0.1), 16, 0.05)
    path = mean_path(rho0, p)
    assert np.all(np.abs(np.diff(path.values, axis=1)) <= 1.0)
    v, t, x = discrete_gradient_sup(path)
    assert x != 0


def test_gradient_sup_bounded_in_n():
    vals = []
    for n in (16, 32, 64):
        rho0, p = _field(TANH, n, 0.1)
        vals.append(discrete_gradient_sup(mean_path(rho0, p))[0])
    assert max(vals) / min(vals) <= 2.0


def test_gradient_square_sup_scalings():
    rows = []
    for n in (16, 32, 64):
        p = ModelParams(n, 1.0, 0.05)
        w = Window1D.for_horizon(p)
        path = mean_path(MeanField.from_profile(InitialProfile.step(0.5, 0.25), w, n), p)
        rows.append(gradient_square_sups(path) + (n,))
    s = [r[0] for r in rows]
    s0 = [r[1] / r[2] ** 2 for r in rows]
    # off-bond values for a step start are dominated by t = 0 near the bond
    assert max(s0) / min(s0) <= 2.0
    assert all(v <= 1.0 for v in s0)
    assert all(np.isfinite(s))


def test_correlation_source_examples():
    p = ModelParams(10, 2.0)
    w = Window1D(-3, 4)
    vals = np.full(w.size, 0.4)
    vals[w.index(1)] = 0.7
    rho = MeanField(w, vals, 0.0)
    assert correlation_source(rho, 0, 1, p) == pytest.approx(-1.8)
    assert correlation_source(rho, 2, 7 - 4, p) == 0.0
    assert correlation_source(rho, 1, 2, p) == pytest.approx(-(10 * 0.3) ** 2)
    assert correlation_source(MeanField(w, np.full(w.size, 0.2), 0.0), 1, 2, p) == 0.0
    with pytest.raises(ValueError):
        correlation_source(rho, 2, 2, p)


def test_correlation_field_access():
    f = CorrelationField.zeros(WindowV(3))
    assert f(0, 1) == 0.0
    with pytest.raises(KeyError):
        f(1, 1)


def _exact_two_point(rho0, p, window, t):
    """Exact means and pair correlations of the closed exclusion process by enumeration."""
    w1 = window.window1d
    m = w1.size
    c = bond_rates(w1, p) * p.n ** 2
    states = list(itertools.product((0, 1), repeat=m))
    idx = {s: i for i, s in enumerate(states)}
    Q = np.zeros((len(states), len(states)))
    for s in states:
        i = idx[s]
        for b in range(m - 1):
            if s[b] != s[b + 1]:
                u = list(s)
                u[b], u[b + 1] = u[b + 1], u[b]
                Q[i, idx[tuple(u)]] += c[b]
                Q[i, i] -= c[b]
    S = np.array(states, float)
    mu0 = np.prod(np.where(S == 1, rho0, 1 - rho0), axis=1)
    mu = sla.expm(t * Q.T) @ mu0
    rho = mu @ S
    return rho, (S * mu[:, None]).T @ S - np.outer(rho, rho)


@pytest.mark.parametrize("alpha,n", [(0.7, 3), (5.0, 2), (0.05, 4)])
def test_correlation_matches_exact_enumeration(alpha, n):
    L = 4
    w = WindowV(L)
    p = ModelParams(n, alpha, 0.2)
    rho0 = np.linspace(0.1, 0.9, w.window1d.size) ** 1.3
    rho, phi = _exact_two_point(rho0, p, w, 0.2)
    run = evolve_correlation(None, MeanField(w.window1d, rho0, 0.0), p, 0.2, window=w, cfl=0.1)
    err = max(abs(phi[x + L, y + L] - run.field(x, y)) for x, y in w.sites())
    assert err < 1e-10
    assert np.abs(run.mean.values - rho).max() < 1e-10


def test_correlation_nonpositive_and_step_halving():
    n, T = 32, 0.05
    p = ModelParams(n, 1.0, T)
    w = WindowV.for_horizon(p)
    rho0 = MeanField.from_profile(TANH, w.window1d, n)
    a = evolve_correlation(None, rho0, p, T)
    b = evolve_correlation(None, rho0, p, T, cfl=1.0)
    assert a.field.values[a.field.mask()].max() <= 1e-15
    assert np.abs(a.field.values - b.field.values).max() < 1e-7
    assert a.sup_abs == pytest.approx(np.max(a.sup_history))


def test_correlation_scaling_constant_profile():
    rows = correlation_sup_scaling(InitialProfile.constant(0.4), 1.0, 0.02, [8, 16])
    assert all(r[1] == 0.0 for r in rows)


def test_duhamel_examples():
    p = ModelParams(16, 1.0, 0.1)
    w = Window1D(-60, 61)
    rho0 = MeanField.from_profile(TANH, w, 16)
    a, b = duhamel_mean_check(rho0, p, 0.1, 0)
    assert abs(a - b) < 1e-6
    a, b = duhamel_mean_check(rho0, p, 0.0, 3)
    assert a == b == pytest.approx(rho0(3))
    c = MeanField.from_profile(InitialProfile.constant(0.25), w, 16)
    a, b = duhamel_mean_check(c, p, 0.1, 5)
    assert a == pytest.approx(0.25, abs=1e-14) and b == pytest.approx(0.25, abs=1e-12)
    # a different reference function exercises the initial-datum term
    a, b = duhamel_mean_check(rho0, p, 0.1, 1, reference=np.full(w.size, 0.5))
    assert abs(a - b) < 1e-6
    with pytest.raises(ValueError):
        duhamel_mean_check(MeanField.from_profile(TANH, Window1D(-150, 151), 16), p, 0.1, 0)


@settings(max_examples=15, deadline=None)
@given(vals=st.lists(st.floats(0.0, 1.0), min_size=8, max_size=20), alpha=st.floats(0.01, 10.0),
       n=st.integers(2, 12))
def test_mean_conserves_and_stays_in_range(vals, alpha, n):
    w = Window1D(-(len(vals) // 2), len(vals) - len(vals) // 2 - 1)
    p = ModelParams(n, alpha, 0.05)
    rho = evolve_mean(MeanField(w, np.array(vals), 0.0), p, 0.05)
    assert abs(rho.values.sum() - sum(vals)) < 1e-8
    assert rho.values.min() >= -1e-9 and rho.values.max() <= 1 + 1e-9


@settings(max_examples=10, deadline=None)
@given(vals=st.lists(st.floats(0.0, 1.0), min_size=9, max_size=9), alpha=st.floats(0.05, 5.0))
def test_correlation_sign_property(vals, alpha):
    w = WindowV(4)
    p = ModelParams(4, alpha, 0.05)
    run = evolve_correlation(None, MeanField(w.window1d, np.array(vals), 0.0), p, 0.05, window=w)
    assert run.field.values[run.field.mask()].max() <= 1e-12


def test_csv_outputs(tmp_path):
    rho0, p = _field(TANH, 8, 0.01)
    write_mean_csv(tmp_path / "m.csv", rho0)
    hdr, rows = read_csv(tmp_path / "m.csv")
    assert hdr == ["t", "x", "value"] and len(rows) == rho0.window.size
    write_correlation_csv(tmp_path / "c.csv", CorrelationField.zeros(WindowV(3)))
    hdr, rows = read_csv(tmp_path / "c.csv")
    assert hdr == ["t", "x", "y", "value"] and len(rows) == WindowV(3).size
    write_scaling_csv(tmp_path / "s.csv", [(8, 0.1, 0.2)])
    assert read_csv(tmp_path / "s.csv")[0] == ["n", "sup_phi", "normalized"]
