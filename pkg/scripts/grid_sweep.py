"""Density x sharing grid comparing policies; a thin wrapper around ``blendsched sweep``.

Usage: python3 scripts/grid_sweep.py --out runs/grid.csv [--requests 2000] [--parallel 4]
Any further arguments are passed through to the sweep subcommand.
"""

from __future__ import annotations

import argparse
import sys

from blendsched.cli import main as cli


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/grid.csv")
    ap.add_argument("--requests", type=int, default=2000)
    ap.add_argument("--parallel", type=int, default=1)
    ap.add_argument("--policies", default="blend,dfs,random")
    args, rest = ap.parse_known_args(argv)
    return cli(["sweep", "--out", args.out, "--total-requests", str(args.requests),
                "--parallel", str(args.parallel), "--policies", args.policies, *rest])


if __name__ == "__main__":
    sys.exit(main())
