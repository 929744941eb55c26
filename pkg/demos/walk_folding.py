"""Folding a slow-bond walk onto the homogeneous walk.

The walk on Z with a slow bond {0, 1} and the plain rate-2 walk have the
same law once sites y and 1 - y are identified. The exact transition
tables agree to rounding. The local time spent on {0, 1} grows like
sqrt(t) for both walks.

Run with ``python3 demos/walk_folding.py``.
"""
import math

from slowbond.lattice import ModelParams
from slowbond.walks import Target, WalkSpec, heat_kernel_folding_check, simulate_walks


def main():
    p = ModelParams(8, 0.1)
    print("folded transition probabilities, slow-bond walk vs rate-2 walk")
    for x, y, t in ((0, 0, 0.5), (3, -2, 1.0), (-5, 4, 2.0)):
        lhs, rhs, gap = heat_kernel_folding_check(x, y, t, p)
        print(f"  x={x:3d} y={y:3d} t={t}: {lhs:.12f} {rhs:.12f} gap={gap:.1e}")

    print("mean local time of {0, 1} over sqrt(t), 4000 replicas")
    target = [Target.of([0, 1])]
    for t in (4.0, 16.0, 64.0):
        row = []
        for kind in ("slow1d", "simple1d-rate2"):
            ens = simulate_walks(WalkSpec(kind, p.n, p.alpha, 0), t, target, replicas=4000, seed=1)
            m, h = ens.mean_ci()
            row.append(f"{kind:15s} {m / math.sqrt(t):.3f} +- {h / math.sqrt(t):.3f}")
        print(f"  t={t:5.1f}  " + "   ".join(row))


if __name__ == "__main__":
    main()
