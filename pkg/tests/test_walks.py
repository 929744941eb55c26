import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from slowbond.lattice import ModelParams
from slowbond.rng import mean_ci
from slowbond.walks import (
    LumpingError,
    StateLimitError,
    Target,
    WalkSpec,
    build_chain,
    check_lumpable,
    folding_sweep,
    heat_kernel_folding_check,
    local_time_bounds_2d,
    lumping_check,
    occupation_integral,
    occupation_integral_spectral,
    rate_monotonicity_check,
    simulate_walk,
    simulate_walks,
    transition_probabilities,
    write_local_time_csv,
)
from slowbond.io import read_csv


def test_spec_validation():
    with pytest.raises(ValueError):
        WalkSpec("nope")
    with pytest.raises(ValueError):
        WalkSpec("reflected-halfline", start=0)
    with pytest.raises(ValueError):
        WalkSpec("slow2d", start=(1, 1))
    with pytest.raises(ValueError):
        WalkSpec("slow1d", n=0)
    assert WalkSpec("slow1d", start=(3, 0)).start == (3,)


def test_rates_at_slow_bond():
    spec = WalkSpec("slow1d", 10, 2.0, 0)
    r = dict(spec.rates(0))
    assert r[(1,)] == pytest.approx(0.2) and r[(-1,)] == 1.0
    frozen = WalkSpec("slow1d", 10, 0.0, 0)
    assert dict(frozen.rates(0)) == {(-1,): 1.0}


def test_zero_time_and_full_space():
    spec = WalkSpec("slow1d", 4, 1.0, 0)
    rec = simulate_walk(spec, 0.0, [Target("all"), Target.of([0])], seed=3)
    assert np.all(rec.local_times == 0) and rec.crossings == 0
    rec = simulate_walk(spec, 7.5, [Target("all")], seed=3)
    assert rec.local_times[0] == pytest.approx(7.5, abs=1e-12)
    with pytest.raises(ValueError):
        simulate_walks(spec, -1.0)


def test_frozen_slow_edges_never_cross():
    spec = WalkSpec("slow2d", 4, 0.0, (0, 1))
    ens = simulate_walks(spec, 50.0, [Target("all")], replicas=200, seed=1)
    assert np.all(ens.crossings == 0)
    assert np.all(ens.final[:, 0] >= 0) or np.all(ens.final[:, 0] <= 0)


def test_local_time_bounds_per_replica():
    spec = WalkSpec("slow2d", 8, 1.0, (0, 1))
    targets = [Target("upper_diagonal"), Target("vertex"), Target("upper_diagonal").complement()]
    ens = simulate_walks(spec, 20.0, targets, replicas=300, seed=5)
    L = ens.local_times
    assert np.all(L >= 0) and np.all(L <= 20.0 + 1e-12)
    np.testing.assert_allclose(L[:, 0] + L[:, 2], 20.0, atol=1e-9)
    assert np.all(ens.crossings >= 0)


def test_batches_reproduce_single_run():
    spec = WalkSpec("slow1d", 8, 0.5, 2)
    full = simulate_walks(spec, 10.0, [Target.of([0, 1])], replicas=40, seed=9)
    a = simulate_walks(spec, 10.0, [Target.of([0, 1])], replicas=25, seed=9)
    b = simulate_walks(spec, 10.0, [Target.of([0, 1])], replicas=15, seed=9, offset=25)
    np.testing.assert_array_equal(full.local_times, np.vstack([a.local_times, b.local_times]))


def test_transition_table_identity_and_stochastic():
    spec = WalkSpec("slow1d", 4, 1.0, 0)
    tab = transition_probabilities(spec, 0.0, (-5, 5))
    np.testing.assert_array_equal(tab.matrix, np.eye(11))
    spec = WalkSpec("simple1d-rate2", 1, 1.0, 0)
    tab = transition_probabilities(spec, 40.0, (-10, 10), starts=[0])
    row = tab.row(0)
    assert abs(row.sum() - 1) < 1e-10 and row.min() >= 0
    assert row.max() - row.min() < 0.02
    with pytest.raises(ValueError):
        transition_probabilities(spec, -1.0)
    with pytest.raises(StateLimitError):
        build_chain(WalkSpec("simple2d-rate2", start=(0, 0)), ((-150, 150), (-150, 150)))


def test_transition_table_matches_monte_carlo():
    spec = WalkSpec("slow1d", 8, 1.0, 0)
    tab = transition_probabilities(spec, 1.0, (-12, 12), starts=[0])
    ens = simulate_walks(spec, 1.0, [Target("all")], replicas=100_000, seed=17)
    for y in range(-3, 4):
        freq = ens.final[:, 0] == y
        m, h = mean_ci(freq.astype(float))
        assert abs(m - tab.prob(0, y)) <= h


def test_folding_examples():
    p = ModelParams(8, 1.0)
    lhs, rhs, gap = heat_kernel_folding_check(1, 1, 0.0, p)
    assert lhs == rhs == 1.0
    a = heat_kernel_folding_check(3, 5, 1.0, ModelParams(8, 0.1))
    b = heat_kernel_folding_check(3, -4, 1.0, ModelParams(8, 0.1))
    assert a[0] == pytest.approx(b[0], abs=1e-15)
    assert a[2] < 1e-9


def test_folding_sweep():
    gaps = folding_sweep(range(-20, 21, 5), range(-20, 21, 5), (0.5, 1.0, 2.0), (0.1, 1.0, 10.0), 8)
    assert gaps.max() < 1e-9


def test_lumping_examples():
    spec = WalkSpec("slow1d", 8, 0.3, 0)
    assert lumping_check(spec, lambda u: u, spec, 1.0, (-10, 10), (-10, 10)) == 0.0
    fold = lambda u: (u[0],) if u[0] >= 1 else (1 - u[0],)
    gap = lumping_check(spec, fold, WalkSpec("reflected-halfline", start=1), 2.0, (-19, 20), (1, 20))
    assert gap < 1e-9


def test_lumping_rejects_bad_relation():
    spec = WalkSpec("slow1d", 8, 0.3, 0)
    chain = build_chain(spec, (-5, 6))
    with pytest.raises(LumpingError, match="~"):
        check_lumpable(chain, lambda u: (abs(u[0]),))


def test_rate_monotonicity_examples():
    P = np.zeros((5, 5))
    for i in range(5):
        for j in (i - 1, i + 1):
            if 0 <= j < 5:
                P[i, j] = 1.0
        P[i] /= P[i].sum()
    base = np.ones(5)
    same = rate_monotonicity_check(P, base, base, [0], 3.0, replicas=20_000, seed=2)
    assert same["Lambda"] == 1.0
    assert abs(same["fast_mean"] - same["slow_mean"]) <= math.hypot(same["fast_ci"], same["slow_ci"])
    dbl = rate_monotonicity_check(P, base, 2 * base, [0], 3.0, replicas=20_000, seed=2)
    assert dbl["Lambda"] == 2.0 and dbl["holds"]
    # time rescaling: L_t under doubled rates equals half of L_{2t} under the base rates
    assert abs(2 * dbl["fast_mean"] - dbl["slow_mean"]) <= math.hypot(2 * dbl["fast_ci"], dbl["slow_ci"])
    rng = np.random.default_rng(4)
    slow = rng.uniform(1, 2, 5)
    fast = rng.uniform(2, 4, 5)
    assert rate_monotonicity_check(P, slow, fast, [0], 3.0, replicas=100_000, seed=3)["holds"]


def test_occupation_routes_agree():
    spec = WalkSpec("simple1d-rate2", 1, 1.0, 0)
    a = occupation_integral(spec, 0, [0, 1], 16.0)
    b = occupation_integral_spectral(spec, 0, [0, 1], 16.0)
    assert abs(a - b) < 1e-7
    assert occupation_integral(spec, 0, [0], 0.0) == 0.0
    slow = WalkSpec("slow1d", 8, 0.5, 0)
    a = occupation_integral(slow, 0, [0, 1], 5.0)
    b = occupation_integral_spectral(slow, 0, [0, 1], 5.0)
    assert abs(a - b) < 1e-7


def test_local_time_table(tmp_path):
    rows = local_time_bounds_2d(ModelParams(4, 1.0), 0.5, [(0, 1), (-2, 3)], replicas=200, seed=1)
    assert len(rows) == 4
    assert all(r.estimate >= 0 for r in rows)
    write_local_time_csv(tmp_path / "lt.csv", rows)
    hdr, body = read_csv(tmp_path / "lt.csv")
    assert hdr[0] == "n" and len(body) == 4


@settings(max_examples=15, deadline=None)
@given(kind=st.sampled_from(["slow1d", "slow2d", "triangle", "quadrant", "diag-fold"]),
       alpha=st.floats(0.0, 5.0), n=st.integers(1, 10))
def test_generators_are_conservative(kind, alpha, n):
    start = {"slow1d": (0,), "slow2d": (0, 1)}.get(kind, (0, 0))
    spec = WalkSpec(kind, n, alpha, start)
    chain = build_chain(spec, spec.default_window(1.0))
    np.testing.assert_allclose(np.asarray(chain.Q.sum(axis=1)).ravel(), 0.0, atol=1e-12)
    assert chain.Q.diagonal().max() <= 0


@settings(max_examples=10, deadline=None)
@given(x=st.integers(-15, 15), y=st.integers(-15, 15), t=st.floats(0.0, 3.0),
       alpha=st.floats(0.01, 20.0))
def test_folding_property(x, y, t, alpha):
    assert heat_kernel_folding_check(x, y, t, ModelParams(8, alpha), margin=15)[2] < 1e-9
