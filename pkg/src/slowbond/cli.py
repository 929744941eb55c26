"""Command-line entry point.

Every subcommand except ``verify`` runs one experiment config. Without
``--config`` the subcommand's default experiment is used.
"""
from __future__ import annotations

import argparse
import dataclasses
import sys
import tempfile
from pathlib import Path

from . import harness as h

# subcommand -> experiment kinds it accepts; the first is the default
GROUPS = {
    "simulate": ("consistency", "qv", "clt", "fluctuations"),
    "moments": ("mean-scaling", "correlation-scaling", "lower-bound"),
    "localtime": ("local-times", "folding", "lumping", "occupation"),
    "semigroup": ("semigroup", "remainder"),
    "fluctuations": ("fluctuations", "clt", "qv", "remainder"),
}


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="slowbond", description="Slow-bond exclusion experiments")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, kinds in GROUPS.items():
        sp = sub.add_parser(name, help=f"run a {'/'.join(kinds)} experiment")
        sp.add_argument("--config", type=Path, help="experiment config file")
        sp.add_argument("--kind", choices=kinds, help="default experiment when no config is given")
        sp.add_argument("--out", type=Path, help="output directory")
        sp.add_argument("--seed", type=_u64)
        sp.add_argument("--replicas", type=int)
    vp = sub.add_parser("verify", help="run a verification tier")
    vp.add_argument("--tier", default="fast")
    vp.add_argument("--out", type=Path, default=Path("verify"))
    vp.add_argument("--seed", type=_u64)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "verify":
        try:
            rows, failures = h.verify_all(args.tier, args.out, args.seed, stream=sys.stdout)
        except h.ConfigValidationError as exc:
            print(f"validation error: {exc}", file=sys.stderr)
            return h.EXIT_INVALID
        print(f"{len(rows) - len(failures)}/{len(rows)} checks passed")
        for f in failures:
            print(f"FAILED {f}", file=sys.stderr)
        return h.EXIT_FAIL if failures else h.EXIT_OK

    over = {k: v for k, v in (("seed", args.seed), ("replicas", args.replicas)) if v is not None}
    if args.out is not None:
        over["out"] = str(args.out)
    kinds = GROUPS[args.command]
    if args.config is None:
        kind = args.kind or kinds[0]
        text = h.serialize_config(h.default_config(kind))
        with tempfile.NamedTemporaryFile("w", suffix=".ini", delete=False) as fh:
            fh.write(text)
        path = Path(fh.name)
    else:
        path = args.config
    try:
        try:
            cfg = h.load_config(path)
        except h.ConfigParseError as exc:
            print(f"parse error: {exc}", file=sys.stderr)
            return h.EXIT_PARSE
        except h.ConfigValidationError as exc:
            print(f"validation error: {exc}", file=sys.stderr)
            return h.EXIT_INVALID
        if cfg.kind not in kinds:
            print(f"validation error: kind: {cfg.kind!r} is not handled by '{args.command}' "
                  f"(expected one of {', '.join(kinds)})", file=sys.stderr)
            return h.EXIT_INVALID
        try:
            cfg = dataclasses.replace(cfg, **over)
            h.validate(cfg)
        except h.ConfigValidationError as exc:
            print(f"validation error: {exc}", file=sys.stderr)
            return h.EXIT_INVALID
        crits, manifest = h.execute(cfg)
    finally:
        if args.config is None:
            path.unlink(missing_ok=True)
    for c in crits:
        print(c.line())
    return h.EXIT_OK if manifest["passed"] else h.EXIT_FAIL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
