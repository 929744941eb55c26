"""Density profile across the slow bond: discrete mean versus the Robin limit.

Starts from a step profile and evolves the discrete mean for a few ``n``.
The jump at the slow bond persists and the discrete profile approaches
the solution of the heat equation with Robin data at the origin.

Run with ``python3 demos/slow_bond_profile.py``.
"""
import numpy as np

from slowbond.lattice import ModelParams, Window1D
from slowbond.moments import InitialProfile, MeanField, evolve_mean
from slowbond.robin import MacroProfile

T = 0.05
ALPHA = 1.0
PROFILE = InitialProfile.step(0.5, 0.25)


def main():
    macro = MacroProfile(lambda u: np.where(np.asarray(u) <= 0, 0.5, 0.25), ALPHA)
    left, right = macro(T, 0.0, "left"), macro(T, 0.0, "right")
    print(f"Robin limit at t={T}: rho(0-)={left:.4f} rho(0+)={right:.4f} jump={left - right:.4f}")
    print(f"{'n':>5} {'rho(0)':>9} {'rho(1)':>9} {'sup error':>10}")
    for n in (32, 64, 128):
        p = ModelParams(n, ALPHA, T)
        w = Window1D.symmetric(int(1.5 * n))
        rho = evolve_mean(MeanField.from_profile(PROFILE, w, n), p, T)
        xs = np.arange(-n // 2, n // 2 + 1)
        cont = np.array([macro(T, x / n, "right" if x >= 1 else "left") for x in xs])
        err = np.abs(np.array([rho(int(x)) for x in xs]) - cont).max()
        print(f"{n:5d} {rho(0):9.4f} {rho(1):9.4f} {err:10.2e}")


if __name__ == "__main__":
    main()
