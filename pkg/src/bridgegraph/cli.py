"""Command line entry point.

    bridgegraph run --config city.yaml [--stages score,features] [--seed N] [--sweep-temperatures]
    bridgegraph fixtures gen --city synthetic-small [--out DIR]

Exit codes: 0 ok, 1 other pipeline error, 2 config error, 3 missing artifact,
4 network failure.
"""
from __future__ import annotations

import argparse
import logging
import sys

from . import fixtures, pipeline
from .errors import BridgeGraphError


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bridgegraph", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run pipeline stages for one config")
    r.add_argument("--config", required=True, help="YAML config path")
    r.add_argument("--stages", default=None,
                   help="comma-separated subset of " + ",".join(pipeline.STAGES))
    r.add_argument("--seed", type=int, default=None, help="override rng_seed")
    r.add_argument("--sweep-temperatures", action="store_true",
                   help="interpret at T in %s as well" % (pipeline.SWEEP_TEMPERATURES,))

    f = sub.add_parser("fixtures", help="bundled synthetic inputs")
    fsub = f.add_subparsers(dest="fixtures_command", required=True)
    g = fsub.add_parser("gen", help="write a synthetic city config, DEM and Overpass cache")
    g.add_argument("--city", required=True, choices=sorted(fixtures.CITIES))
    g.add_argument("--out", default=".", help="directory to write into (default: .)")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            manifest = pipeline.run(args.config, args.stages, args.seed, args.sweep_temperatures)
            ran = set(pipeline.parse_stages(args.stages))
            for s in (s for s in manifest["stages"] if s["name"] in ran):
                print(f"{s['name']:<10} {s['seconds']:8.2f}s  {len(s['outputs'])} file(s)")
        else:
            print(fixtures.generate_city(args.city, args.out))
    except BridgeGraphError as exc:
        print(f"bridgegraph: error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
