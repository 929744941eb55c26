import json
import subprocess
import sys

import pytest
from hypothesis import given, settings, strategies as st

from slowbond import cli
from slowbond import harness as h


def _write(tmp_path, text, name="exp.ini"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_default_configs_validate():
    for kind in h.KINDS:
        cfg = h.default_config(kind)
        assert h.parse_config(h.serialize_config(cfg)) == cfg
    with pytest.raises(h.ConfigValidationError, match="kind"):
        h.default_config("nope")


def test_parse_errors_name_the_field():
    with pytest.raises(h.ConfigParseError, match="bogus"):
        h.parse_config("[experiment]\nkind = folding\nbogus = 1\n")
    with pytest.raises(h.ConfigParseError, match="alpha"):
        h.parse_config("[experiment]\nkind = folding\nalpha = fast\n")
    with pytest.raises(h.ConfigParseError):
        h.parse_config("kind = folding\n")
    with pytest.raises(h.ConfigParseError, match="kind"):
        h.parse_config("[experiment]\nalpha = 1\n")


@pytest.mark.parametrize("line,field", [
    ("n_sweep =", "n_sweep"),
    ("n_sweep = 16, 8", "n_sweep"),
    ("replicas = 0", "replicas"),
    ("tolerance = -1", "tolerance"),
    ("profile = wiggly", "profile"),
    ("functions = J=1,q=2", "functions"),
])
def test_validation_errors_name_the_field(line, field):
    with pytest.raises(h.ConfigValidationError, match=f"^{field}"):
        h.parse_config(f"[experiment]\nkind = folding\n{line}\n")


def test_profiles_and_functions():
    assert h.parse_profile("constant:0.3").constant_value == 0.3
    step = h.parse_profile("step:0.5,0.25")
    assert step.left == 0.5 and step.right == 0.25
    f = h.parse_function("J=0.5,a=2,K=3,cl=0.5,cr=-0.5", 1.0)
    assert f.jump == pytest.approx(0.5, abs=1e-12)
    with pytest.raises(KeyError):
        h.parse_function("a=2", 1.0)


def test_criterion_lines():
    c = h.Criterion.at_most(5, "folding", 1e-12, 1e-9)
    assert c.passed and c.line().startswith("[PASS] criterion  5 folding")
    assert not h.Criterion.at_least(3, "floor", 0.1, 0.2).passed


def test_run_experiment_statuses(tmp_path):
    status, man = h.run_experiment(_write(tmp_path, "[experiment]\nkind = folding\n"), out=tmp_path / "a")
    assert status == h.EXIT_OK and man["passed"]
    bad = _write(tmp_path, "[experiment]\nkind = folding\nn_sweep =\n", "bad.ini")
    assert h.run_experiment(bad) == (h.EXIT_INVALID, None)
    broken = _write(tmp_path, "[experiment\nkind = folding\n", "broken.ini")
    assert h.run_experiment(broken) == (h.EXIT_PARSE, None)
    assert h.run_experiment(tmp_path / "missing.ini")[0] == h.EXIT_PARSE
    # an unreachable tolerance makes a criterion fail
    strict = _write(tmp_path, "[experiment]\nkind = remainder\ntolerance = 1.0001\n", "strict.ini")
    status, man = h.run_experiment(strict, out=tmp_path / "b")
    assert status == h.EXIT_FAIL and not man["passed"]


def test_rerun_is_byte_identical_and_manifest_complete(tmp_path):
    cfg = _write(tmp_path, "[experiment]\nkind = lumping\n")
    h.run_experiment(cfg, out=tmp_path / "r1")
    _, man = h.run_experiment(cfg, out=tmp_path / "r2")
    csvs = sorted(p.name for p in (tmp_path / "r1").glob("*.csv"))
    assert csvs
    for name in csvs:
        assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes()
    on_disk = {str(p.relative_to(tmp_path / "r2")) for p in (tmp_path / "r2").rglob("*") if p.is_file()}
    assert on_disk - {"manifest.json"} == set(man["files"])
    saved = json.loads((tmp_path / "r2" / "manifest.json").read_text())
    assert saved["config_hash"] == man["config_hash"] and len(saved["config_hash"]) == 64


def test_verify_unknown_tier(tmp_path):
    with pytest.raises(h.ConfigValidationError, match="tier"):
        h.verify_all("medium", tmp_path)
    assert cli.main(["verify", "--tier", "medium", "--out", str(tmp_path)]) == h.EXIT_INVALID


def test_cli_exit_codes(tmp_path, capsys):
    good = _write(tmp_path, "[experiment]\nkind = folding\n")
    assert cli.main(["localtime", "--config", str(good), "--out", str(tmp_path / "o")]) == 0
    assert "[PASS] criterion  5" in capsys.readouterr().out
    assert (tmp_path / "o" / "manifest.json").exists()
    bad = _write(tmp_path, "[experiment]\nkind = folding\nn_sweep =\n", "bad.ini")
    assert cli.main(["localtime", "--config", str(bad)]) == 3
    assert "n_sweep" in capsys.readouterr().err
    broken = _write(tmp_path, "[experiment\n", "broken.ini")
    assert cli.main(["localtime", "--config", str(broken)]) == 2
    # a kind the subcommand does not handle is a validation error
    assert cli.main(["moments", "--config", str(good)]) == 3
    strict = _write(tmp_path, "[experiment]\nkind = remainder\ntolerance = 1.0001\n", "strict.ini")
    assert cli.main(["semigroup", "--config", str(strict), "--out", str(tmp_path / "s")]) == 1
    assert cli.main(["localtime", "--config", str(good), "--replicas", "0"]) == 3


def test_cli_default_experiment_and_module_entry(tmp_path):
    assert cli.main(["semigroup", "--kind", "remainder", "--out", str(tmp_path / "d")]) == 0
    with pytest.raises(SystemExit):
        cli.main(["localtime", "--seed", "-1"])
    r = subprocess.run([sys.executable, "-m", "slowbond", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "verify" in r.stdout


@settings(max_examples=40, deadline=None)
@given(kind=st.sampled_from(sorted(h.KINDS)),
       alpha=st.floats(0.01, 50.0), T=st.floats(0.0, 5.0),
       ns=st.lists(st.integers(1, 4096), min_size=1, max_size=5, unique=True),
       replicas=st.integers(1, 10 ** 6), seed=st.integers(0, 2 ** 64 - 1),
       tol=st.floats(1e-12, 10.0))
def test_config_round_trip(kind, alpha, T, ns, replicas, seed, tol):
    base = h.default_config(kind)
    cfg = h.ExperimentConfig(kind, alpha, max(T, base.t, base.s), tuple(sorted(ns)), base.profile,
                             base.functions, replicas, seed, "out dir", tol, base.t, base.s, base.floor)
    h.validate(cfg)
    text = h.serialize_config(cfg)
    assert h.parse_config(text) == cfg
    assert h.config_hash(h.parse_config(text)) == h.config_hash(cfg)
