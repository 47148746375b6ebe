"""Command-line entry point: ``mixsgd <experiment> --config cfg.json --out dir``.

Exit status 0 means the experiment ran (whatever its checks say), 1 a
configuration error, 2 an internal error.
"""

import argparse
import json
import logging
import sys

from .config import KINDS, parse_config
from .experiments import run_experiment
from .optimizer import ConfigError

log = logging.getLogger("mixsgd")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mixsgd", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="experiment", required=True)
    for kind in KINDS:
        p = sub.add_parser(kind, help=f"run the {kind} experiment")
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--workers", type=int, default=1, help="worker processes (default 1)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return 1
    try:
        cfg = parse_config(args.config, args.experiment, args.seed)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    try:
        summary = run_experiment(cfg, args.out, args.workers)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(e).__name__}: {e} (partial outputs in {args.out}/quarantine)",
              file=sys.stderr)
        return 2
    checks = summary.get("checks", {})
    for name, c in checks.items():
        print(f"{'PASS' if c['pass'] else 'FAIL'} {name}")
    print(json.dumps({"experiment": cfg.kind, "out": args.out, "all_passed": summary["all_passed"]}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
