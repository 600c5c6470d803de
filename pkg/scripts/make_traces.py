"""Write the bundled trace analogs and the four representative workloads to disk.

Usage: python3 scripts/make_traces.py --out runs/data [--requests 10000] [--seed 0]
"""

from __future__ import annotations

import argparse
from pathlib import Path

from blendsched.cli import main as cli
from blendsched.pipeline import TRACE_ANALOGS


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/data")
    ap.add_argument("--requests", type=int, default=10_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    out = Path(args.out)
    traces = out / "traces"
    rc = cli(["traces", "--out", str(traces), "--seed", str(args.seed)])
    for name, (density, sharing) in TRACE_ANALOGS.items():
        rc = rc or cli(["synth", "--traces", str(traces), "--out", str(out / f"{name}.jsonl"),
                        "--target-density", str(density), "--target-sharing", str(sharing),
                        "--total-requests", str(args.requests), "--seed", str(args.seed)])
    return rc


if __name__ == "__main__":
    raise SystemExit(main())
