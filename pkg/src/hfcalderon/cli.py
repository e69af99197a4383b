"""Command-line entry point ``hfcal``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import ConfigError
from .harness import COMMANDS, PRESETS, load_scenario, preset, run

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

_HELP = {
    "forward-kernel": "parametrix kernel on the boundary mesh for each h",
    "born": "Born boundary kernel and its normal derivative for each h",
    "stationary": "leading stationary-phase kernel for each h",
    "xray": "weighted ray data of the potential difference",
    "invert": "regularized ray-transform inversion of ray data",
    "reconstruct": "Born data to reconstructed potential for each h",
    "sweep": "reconstruction error against h with the fitted slope",
    "dtn": "collar symbols, heat symbols and DtN kernels for each h",
    "selftest": "run the acceptance suite",
}


def _parse_h(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.replace(" ", "").split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid h list {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("h list is empty")
    return values


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError("worker count must be at least 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hfcal", description="High-frequency boundary data "
                                     "pipelines: kernels, Born data, ray transforms and DtN symbols.")
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, help=_HELP[name], description=_HELP[name])
        sp.add_argument("--scenario", default="flat",
                        help=f"TOML scenario file or preset name ({', '.join(PRESETS)}); default flat")
        sp.add_argument("--out", type=Path, help="output directory (overrides the scenario)")
        sp.add_argument("--workers", type=_positive_int,
                        help="worker threads (default from HFCAL_WORKERS, else 1)")
        sp.add_argument("--strict", action="store_true",
                        help="reject unknown scenario keys instead of warning")
        sp.add_argument("--h", type=_parse_h, help="comma-separated h values overriding the scenario")
        if name == "selftest":
            sp.add_argument("--only", help="comma-separated criterion numbers, e.g. 1,4,8")
    return parser


def _scenario(arg: str, strict: bool):
    if arg in PRESETS and not Path(arg).exists():
        return preset(arg)
    return load_scenario(arg, strict=strict)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        scen = _scenario(args.scenario, args.strict)
        if args.h is not None:
            scen.params.h = args.h
            scen.validate()
        only = None
        if getattr(args, "only", None):
            only = [int(v) for v in args.only.split(",") if v]
    except (ConfigError, ValueError) as exc:
        print(f"hfcal: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    result = run(args.command, scen, args.out, args.workers, only=only)
    m = result.manifest
    print(json.dumps({"command": m["command"], "status": m["status"], "out": str(result.out_dir),
                      "files": len(m["files"]), "summary": m["summary"]}, indent=1))
    if result.status:
        print(f"hfcal: stage {m['failed_stage']!r} failed: {m['error']['message']}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
