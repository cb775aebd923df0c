"""Command line entry point: ``condgreeks <command> [--config PATH] ...``.

Exit codes: 0 success, 2 configuration error, 3 ill-conditioned estimate
(guard, degenerate kernel or decomposition), 4 property failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .config import load_config
from .errors import CondGreeksError, IllConditionedError, PropertyFailure
from .experiments import COMMANDS


def _bandwidth(text: str):
    if text == "auto":
        return text
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bandwidth must be a number or 'auto', got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="condgreeks", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", type=Path, help="TOML config or a run manifest (JSON)")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: ./out)")
    p.add_argument("--seed", type=int, help="master seed, overrides mc.master_seed")
    p.add_argument("--shards", type=int, help="worker threads, overrides mc.shards")
    p.add_argument("--estimator", choices=["malliavin", "kernel"], help="overrides estimator.method")
    p.add_argument("--gradient", choices=["wd", "score"], help="overrides gradient.method")
    p.add_argument("--bandwidth", type=_bandwidth, help="kernel bandwidth, overrides estimator.bandwidth")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _overrides(args) -> dict:
    pairs = [
        ("mc", "master_seed", args.seed),
        ("mc", "shards", args.shards),
        ("estimator", "method", args.estimator),
        ("gradient", "method", args.gradient),
        ("estimator", "bandwidth", args.bandwidth),
    ]
    out: dict = {}
    for section, key, value in pairs:
        if value is not None:
            out.setdefault(section, {})[key] = value
    return out


def _report(command: str, summary: dict) -> None:
    if command == "hj-check":
        for c in summary["checks"]:
            status = "PASS" if c["passed"] else "FAIL"
            print(f"{status} {c['property']}: {c['value']:.3g} (tol {c['tolerance']:g}) {c['detail']}")
    print(json.dumps(summary, indent=2, default=str))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, overrides=_overrides(args))
        t0 = time.perf_counter()
        summary = COMMANDS[args.command](cfg, args.out)
        _report(args.command, summary)
        print(f"elapsed {time.perf_counter() - t0:.1f}s", file=sys.stderr)
        if summary.get("failed"):
            raise PropertyFailure(f"failed properties: {', '.join(summary['failed'])}")
    except IllConditionedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(json.dumps(exc.diagnostics, indent=2, default=str), file=sys.stderr)
        return exc.exit_code
    except CondGreeksError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
