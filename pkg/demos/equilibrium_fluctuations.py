"""Equilibrium density fluctuations and their martingale.

Runs the exclusion process from Bernoulli(1/2) and tracks one test
function with a jump at the slow bond. The variance of the martingale
part matches its mean quadratic variation, and both approach the
predicted limit, which includes the weight carried by the slow bond.

Run with ``python3 demos/equilibrium_fluctuations.py`` (about a minute).
"""
import numpy as np

from slowbond.exclusion import martingale_and_qv, run_ensemble
from slowbond.fluctuations import qv_prediction
from slowbond.lattice import ModelParams, Window1D
from slowbond.moments import InitialProfile
from slowbond.robin import MacroProfile, make_test_function

N, T, REPLICAS = 32, 0.1, 400


def main():
    f = make_test_function(0.5, 1.0, K=3, a=1.0)
    p = ModelParams(N, 1.0, T)
    w = Window1D.for_horizon(p, reach=f.extent)
    times = np.linspace(0.0, T, 5)
    ens = run_ensemble(InitialProfile.constant(0.5), p, w, T, times, REPLICAS, seed=7, functions=[f])
    M, Q = martingale_and_qv(ens)
    macro = MacroProfile.flat(0.5, 1.0)
    print(f"n={N}, {REPLICAS} replicas, window of {w.size} sites")
    print(f"{'t':>6} {'E M':>9} {'Var M':>9} {'E QV':>9} {'limit':>9}")
    for k, t in enumerate(times):
        print(f"{t:6.3f} {M[:, k].mean():9.4f} {M[:, k].var(ddof=1):9.4f} {Q[:, k].mean():9.4f} "
              f"{qv_prediction(f, macro, t):9.4f}")


if __name__ == "__main__":
    main()
