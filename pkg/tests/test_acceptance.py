"""The thirteen acceptance criteria, each at its stated tolerance.

Every test runs the default experiment of the matching kind through the
harness, so the numbers here are the ones ``slowbond verify --tier full``
reports. One summary line per criterion is printed at the end of the run.
"""
import time

import pytest

from conftest import ACCEPTANCE_LINES
from slowbond import harness as h

# (number, kind, title, runtime budget in seconds)
CRITERIA = [
    (1, "mean-scaling", "discrete-derivative scaling", 300),
    (2, "correlation-scaling", "correlation scaling", 1200),
    (3, "lower-bound", "lower-bound mechanism", 600),
    (4, "local-times", "2-D local times", 900),
    (5, "folding", "folding identity", 60),
    (6, "lumping", "lumping", 120),
    (7, "occupation", "occupation integrals", 120),
    (8, "clt", "initial-field CLT", 300),
    (9, "qv", "martingale and quadratic variation", 1800),
    (10, "fluctuations", "OU conditional law", 1800),
    (11, "semigroup", "semigroup correctness", 120),
    (12, "remainder", "remainder scaling", 60),
    (13, "consistency", "cross-module consistency", 900),
]

SLOW = {2, 4, 8, 9, 10, 13}


def _params():
    for number, kind, title, budget in CRITERIA:
        marks = [pytest.mark.slow] if number in SLOW else []
        yield pytest.param(number, kind, title, budget, marks=marks, id=f"c{number:02d}-{kind}")


@pytest.mark.parametrize("number,kind,title,budget", list(_params()))
def test_criterion(number, kind, title, budget, tmp_path):
    cfg = h.default_config(kind, out=str(tmp_path / kind))
    start = time.perf_counter()
    crits, manifest = h.execute(cfg)
    elapsed = time.perf_counter() - start
    ok = manifest["passed"] and bool(crits)
    checks = "; ".join(f"{c.name} {c.value:.4g} {c.relation} {c.threshold:.4g}" for c in crits)
    ACCEPTANCE_LINES[number] = (f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d} {title} "
                                f"({elapsed:.0f} s): {checks}")
    assert all(c.number == number for c in crits)
    failed = [c.line() for c in crits if not c.passed]
    assert ok, "\n".join(failed)
    assert elapsed <= budget, f"runtime {elapsed:.0f} s exceeds {budget} s"
