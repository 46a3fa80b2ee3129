"""Command-line entry point: ``nlval <mode> --config PATH [--out DIR]``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import load_config
from .errors import ConfigError
from .harness import run_scenario

EXIT_PASS, EXIT_NUMERICAL, EXIT_CONFIG = 0, 1, 2
SUBCOMMANDS = ("value", "invariance", "mc-compare", "ledger", "representation")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nlval", description="Nonlinear valuation scenarios.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path, help="scenario file")
        p.add_argument("--out", type=Path, default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override every seed")
        p.add_argument("--refine", type=int, default=1, help="grid refinement multiplier")
    return parser


def _failure(out: Path | None, kind: str, exc: BaseException) -> None:
    record = {"status": "error", "kind": kind, "type": type(exc).__name__, "message": str(exc)}
    for attr in ("section", "key", "line", "step", "residual"):
        if getattr(exc, attr, None) is not None:
            record[attr] = getattr(exc, attr)
    print(json.dumps(record, default=float), file=sys.stderr)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "failure.json").write_text(json.dumps(record, indent=2, default=float))


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    out = args.out
    try:
        cfg = load_config(args.config).with_mode(args.command.replace("-", "_"))
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if args.refine < 1:
            raise ConfigError("--refine must be >= 1")
        out = out if out is not None else Path(cfg.output)
        result = run_scenario(cfg, out, refine=args.refine)
    except ConfigError as exc:
        _failure(out, "config", exc)
        return EXIT_CONFIG
    except (ArithmeticError, RuntimeError, ValueError) as exc:
        _failure(out, "numerical", exc)
        return EXIT_NUMERICAL
    print(json.dumps({"mode": result.mode, "passed": result.passed, "summary": result.summary},
                     default=float))
    return EXIT_PASS if result.passed else EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
