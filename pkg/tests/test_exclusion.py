import math
import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from slowbond.exclusion import (
    Configuration,
    boundary_influence,
    density_field,
    density_field_samples,
    empirical_correlation,
    empirical_mean,
    field_truncation_bound,
    martingale_and_qv,
    recompute_integrals,
    run,
    run_ensemble,
    sample_initial,
    sample_initial_batch,
    solver_means,
    write_snapshots,
)
from slowbond.io import read_csv
from slowbond.lattice import ModelParams, Window1D, WindowV
from slowbond.moments import InitialProfile, MeanField, evolve_correlation
from slowbond.robin import make_test_function

HALF = InitialProfile.constant(0.5)
F = make_test_function(0.5, 1.0, K=3, a=1.0)


def test_sample_initial_examples():
    w = Window1D.symmetric(50)
    assert sample_initial(InitialProfile.constant(1.0), w, 8).particles == w.size
    assert sample_initial(InitialProfile.constant(0.0), w, 8).particles == 0
    big = Window1D.symmetric(5000)
    c = sample_initial(HALF, big, 8, seed=4)
    m = c.particles / big.size
    assert abs(m - 0.5) <= 3 * 0.5 / math.sqrt(big.size)
    batch = sample_initial_batch(HALF, w, 8, 3, seed=4)
    np.testing.assert_array_equal(batch[0], sample_initial(HALF, w, 8, seed=4).occupancy)
    np.testing.assert_array_equal(batch[2], sample_initial(HALF, w, 8, seed=4, replica=2).occupancy)


def test_configuration_packing():
    w = Window1D.symmetric(13)
    c = sample_initial(HALF, w, 4, seed=1)
    back = Configuration.from_packed(w, c.packed())
    np.testing.assert_array_equal(back.occupancy, c.occupancy)
    with pytest.raises(ValueError):
        Configuration(w, np.full(w.size, 2, np.uint8))


def test_run_trajectory_invariants():
    p = ModelParams(8, 1.0, 0.2)
    w = Window1D.symmetric(24)
    c = sample_initial(InitialProfile.tanh(), w, 8, seed=2)
    tr = run(c, p, 0.2, [0.05, 0.2], seed=3)
    assert tr.events > 0 and tr.log_complete
    assert np.all(np.diff(tr.event_times) > 0)
    assert tr.event_bonds.min() >= w.lo and tr.event_bonds.max() < w.hi
    assert tr.final.particles == c.particles
    np.testing.assert_array_equal(tr.final.occupancy, tr.snapshots[-1])
    assert np.all(tr.snapshots.sum(axis=1) == c.particles)
    with pytest.raises(ValueError):
        run(c, p, 0.3)
    with pytest.raises(ValueError):
        run(c, p, 0.1, [0.15])


def test_frozen_bond_conserves_each_side():
    # alpha is tiny rather than zero; the test checks the log never uses the slow bond
    p = ModelParams(8, 1e-300, 0.2)
    w = Window1D.symmetric(20)
    c = sample_initial(InitialProfile.step(0.9, 0.1), w, 8, seed=7)
    tr = run(c, p, 0.2, [0.2], seed=1)
    assert not np.any(tr.event_bonds == 0)
    left = w.sites <= 0
    assert tr.final.occupancy[left].sum() == c.occupancy[left].sum()


def test_determinism():
    p = ModelParams(8, 0.5, 0.1)
    w = Window1D.symmetric(20)
    a = run_ensemble(InitialProfile.tanh(), p, w, 0.1, [0.05, 0.1], 20, seed=11, functions=[F])
    b = run_ensemble(InitialProfile.tanh(), p, w, 0.1, [0.05, 0.1], 20, seed=11, functions=[F])
    np.testing.assert_array_equal(a.snapshots, b.snapshots)
    np.testing.assert_array_equal(a.qv, b.qv)
    assert np.all(a.conserved)
    with pytest.raises(KeyError):
        a.time_index(0.07)


def test_equilibrium_means_stay_half():
    p = ModelParams(8, 0.3, 0.1)
    w = Window1D.symmetric(24)
    ens = run_ensemble(HALF, p, w, 0.1, [0.1], 4000, seed=5)
    m, h = empirical_mean(ens, 0.1, [-3, 0, 1, 4])
    assert np.all(np.abs(m - 0.5) <= h)
    rho = solver_means(HALF, p, w, [0.1])[0.1]
    phi, hp = empirical_correlation(ens, 0.1, [(0, 1), (-2, 3)], rho)
    assert np.all(np.abs(phi) <= hp)


def test_step_profile_anticorrelated_across_bond():
    p = ModelParams(4, 0.5, 0.1)
    w = Window1D.symmetric(20)
    prof = InitialProfile.step(0.9, 0.1)
    ens = run_ensemble(prof, p, w, 0.1, [0.1], 20000, seed=3)
    rho = solver_means(prof, p, w, [0.1])[0.1]
    m, h = empirical_mean(ens, 0.1, [0, 1])
    assert np.all(np.abs(m - [rho(0), rho(1)]) <= h)
    phi, hp = empirical_correlation(ens, 0.1, [(0, 1)], rho)
    assert phi[0] + hp[0] < 0
    run2 = evolve_correlation(None, MeanField.from_profile(prof, w, 4), p, 0.1, window=WindowV(20))
    assert abs(phi[0] - run2.field(0, 1)) <= hp[0]


def test_density_field_examples():
    p = ModelParams(16, 1.0, 0.1)
    w = Window1D.symmetric(200)
    full = Configuration(w, np.ones(w.size, np.uint8))
    ones = MeanField(w, np.ones(w.size), 0.0)
    assert density_field(full, F, ones, p) == 0.0
    c = sample_initial(InitialProfile.tanh(), w, 16, seed=1)
    rho = MeanField.from_profile(InitialProfile.tanh(), w, 16)
    g = make_test_function(-0.2, 1.0, K=3, a=2.0)
    lhs = density_field(c, F + g, rho, p)
    assert lhs == pytest.approx(density_field(c, F, rho, p) + density_field(c, g, rho, p), abs=1e-12)
    assert field_truncation_bound(F, w, 16) < 1e-8
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        small = Window1D.symmetric(10)
        density_field(Configuration(small, np.ones(small.size, np.uint8)), F,
                      MeanField(small, np.ones(small.size), 0.0), p)
    assert any("truncation" in str(r.message) for r in rec)


def test_initial_field_variance():
    n = 32
    p = ModelParams(n, 1.0, 0.1)
    w = Window1D.symmetric(6 * n)
    prof = InitialProfile.tanh()
    ens = run_ensemble(prof, p, w, 0.0, [0.0], 10_000, seed=21)
    rho = MeanField.from_profile(prof, w, n)
    y = density_field_samples(ens, 0.0, F, rho)
    u = w.sites / n
    exact = np.sum(F(u) ** 2 * rho.values * (1 - rho.values)) / n
    assert abs(y.var(ddof=1) / exact - 1) < 0.05


def test_recompute_matches_kernel():
    p = ModelParams(8, 0.7, 0.1)
    w = Window1D.symmetric(24)
    c = sample_initial(InitialProfile.tanh(), w, 8, seed=9)
    tr = run(c, p, 0.1, [0.1], seed=13)
    fwd = recompute_integrals(tr, F)
    rev = recompute_integrals(tr, F, reverse=True)
    assert abs(fwd[0] - rev[0]) < 1e-10 and abs(fwd[1] - rev[1]) < 1e-10
    ens = run_ensemble(None, p, w, 0.1, [0.1], 1, seed=13, functions=[F], initial=c.occupancy[None, :])
    np.testing.assert_array_equal(ens.snapshots[0, -1], tr.final.occupancy)
    assert ens.integral[0, 0, -1] == pytest.approx(fwd[0], abs=1e-9 * max(1, abs(fwd[0])))
    assert ens.qv[0, 0, -1] == pytest.approx(fwd[1], rel=1e-10)


def test_truncated_log_refuses_recompute():
    p = ModelParams(8, 1.0, 0.1)
    w = Window1D.symmetric(24)
    tr = run(sample_initial(HALF, w, 8, seed=1), p, 0.1, [0.1], seed=2, event_cap=10)
    assert not tr.log_complete and tr.final is None
    with pytest.raises(ValueError):
        recompute_integrals(tr, F)


def test_martingale_examples():
    p = ModelParams(16, 1.0, 0.05)
    w = Window1D.symmetric(90)
    zero = F * 0.0
    ens = run_ensemble(InitialProfile.tanh(), p, w, 0.05, [0.0, 0.025, 0.05], 1000, seed=8,
                       functions=[zero, F])
    M0, Q0 = martingale_and_qv(ens, 0)
    assert np.all(M0 == 0) and np.all(Q0 == 0)
    M, Q = martingale_and_qv(ens, 1)
    assert np.all(np.diff(Q, axis=1) >= 0)
    m = M[:, -1]
    assert abs(m.mean()) <= 3 * m.std(ddof=1) / math.sqrt(m.size)
    # isometry: Var M_t against E QV_t, each with its own standard error
    v = m.var(ddof=1)
    se_v = math.sqrt(np.var((m - m.mean()) ** 2, ddof=1) / m.size)
    se_q = Q[:, -1].std(ddof=1) / math.sqrt(m.size)
    assert abs(v - Q[:, -1].mean()) <= 3 * math.hypot(se_v, se_q)


def test_boundary_influence_small():
    p = ModelParams(16, 1.0, 0.1)
    w = Window1D.for_horizon(p)
    assert boundary_influence(InitialProfile.tanh(), p, w, 0.1, [-5, 0, 1, 5]) < 1e-10


def test_write_snapshots(tmp_path):
    p = ModelParams(4, 1.0, 0.1)
    w = Window1D.symmetric(10)
    ens = run_ensemble(HALF, p, w, 0.1, [0.0, 0.1], 5, seed=1)
    paths = write_snapshots(tmp_path, ens)
    assert all(q.exists() for q in paths)
    raw = np.frombuffer(paths[0].read_bytes(), np.uint8).reshape(5, 2, -1)
    np.testing.assert_array_equal(np.unpackbits(raw, axis=-1)[..., :w.size], ens.snapshots)
    hdr, rows = read_csv(paths[1])
    assert hdr == ["t", "x", "value"] and len(rows) == 2 * w.size
    meta = json.loads(paths[2].read_text())
    assert meta["seed"] == 1 and meta["shape"] == [5, 2, w.size]


@settings(max_examples=10, deadline=None)
@given(alpha=st.floats(0.01, 10.0), n=st.integers(2, 12), seed=st.integers(0, 2 ** 32))
def test_conservation_property(alpha, n, seed):
    p = ModelParams(n, alpha, 0.05)
    w = Window1D.symmetric(15)
    ens = run_ensemble(InitialProfile.step(0.8, 0.3), p, w, 0.05, [0.0, 0.05], 4, seed=seed)
    assert np.all(ens.conserved)
    np.testing.assert_array_equal(ens.snapshots[:, 0].sum(axis=1), ens.snapshots[:, 1].sum(axis=1))
