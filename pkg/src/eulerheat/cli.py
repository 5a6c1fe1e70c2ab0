"""Command-line entry point: ``eulerheat <subcommand> --scenario NAME|PATH --out DIR``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .config import ConfigError, apply_overrides, builtin_names, load_scenario
from .pde import BlowupError


def _common(p: argparse.ArgumentParser, out_required: bool = True):
    p.add_argument("--scenario", required=True, help="builtin name or path to a scenario YAML file")
    p.add_argument("--out", required=out_required, type=Path, help="output directory")
    p.add_argument("--threads", type=int, default=1, help="worker threads for deposition (default 1)")
    p.add_argument("--n", type=int, help="override grid resolution")
    p.add_argument("--dt", type=float, help="override time step")
    p.add_argument("--M", type=int, help="override samples per loop")
    p.add_argument("--seed", type=int, help="override scenario seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eulerheat", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    _common(sub.add_parser("evolve-loops", help="exact loop evolution, deposition and diagnostics"))
    _common(sub.add_parser("run-pde", help="grid solver trajectory and diagnostics"))
    cert = sub.add_parser("certify", help="relative-entropy certification")
    _common(cert)
    cert.add_argument("--from-run", type=Path, help="certify snapshots of an existing run instead of regenerating")
    cert.add_argument("--source", choices=["loops", "pde"], help="trajectory to regenerate (default: loops if available)")
    _common(sub.add_parser("identity", help="per-loop entropy identity residuals"))
    cmp_ = sub.add_parser("compare", help="compare the final reduced fields of two runs")
    cmp_.add_argument("run_a", type=Path)
    cmp_.add_argument("run_b", type=Path)
    cmp_.add_argument("--out", type=Path, help="write the comparison as JSON here")
    sub.add_parser("list", help="list builtin scenarios")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "list":
            print("\n".join(builtin_names()))
            return 0
        if args.command == "compare":
            result = harness.compare(args.run_a, args.run_b)
            text = json.dumps(result, indent=2, sort_keys=True)
            if args.out:
                args.out.parent.mkdir(parents=True, exist_ok=True)
                args.out.write_text(text + "\n")
            print(text)
            return 0
        cfg = apply_overrides(load_scenario(args.scenario), n=args.n, dt=args.dt, M=args.M, seed=args.seed)
        if args.command == "evolve-loops":
            result = harness.run_loops(cfg, args.out, args.threads)["summary"]
        elif args.command == "run-pde":
            result = harness.run_pde(cfg, args.out, args.threads)["summary"]
        elif args.command == "certify":
            source = args.from_run if args.from_run is not None else args.source
            result = harness.run_certify(cfg, args.out, source, args.threads)
            print(f"{cfg['name']}: {result['verdict']}")
            for entry in result["trials"]:
                print(f"  trial {entry['trial']:2d} {entry['family']:<12s} r0={entry['r0']['r0']:.4g} "
                      f"min_margin={entry['min_margin']:+.3e} tol={entry['tol']:.1e} {'PASS' if entry['passed'] else 'FAIL'}")
            return 0 if result["verdict"] == "PASS" else 1
        else:
            result = harness.run_identity(cfg, args.out, args.threads)
        print(json.dumps(result, indent=2, sort_keys=True, default=float))
        return 0
    except (ConfigError, harness.ProvenanceError, BlowupError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
