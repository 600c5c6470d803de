"""Throughput of blend against the DFS and random baselines on the four trace analogs.

Usage: python3 scripts/run_analogs.py [--requests 10000] [--sample-prob 0.01] [--csv out.csv]
"""

from __future__ import annotations

import argparse
import csv
import sys

from blendsched.cost_model import load_hardware_config, load_model_config
from blendsched.pipeline import TRACE_ANALOGS, analog_workload, default_pools, run_policy
from blendsched.prefix_tree import prepare_tree
from blendsched.scheduler import SchedConfig

COLUMNS = ("trace", "policy", "throughput", "vs_blend", "makespan_over_optimal", "sharing", "optimal_sharing",
           "density_std")


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--requests", type=int, default=10_000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--sample-prob", type=float, default=0.01)
    ap.add_argument("--policies", default="blend,dfs,random")
    ap.add_argument("--traces", default=",".join(TRACE_ANALOGS))
    ap.add_argument("--csv", help="also write the table here")
    args = ap.parse_args(argv)
    mc, hc = load_model_config(), load_hardware_config()
    pools = default_pools(args.seed)
    rows = []
    for name in args.traces.split(","):
        reqs, _ = analog_workload(name, mc, hc, pools, args.requests, args.seed)
        tree = prepare_tree(reqs, mc, hc, args.sample_prob, args.seed)
        reports = {p: run_policy(reqs, mc, hc, SchedConfig(policy=p, sample_prob=args.sample_prob, seed=args.seed),
                                 tree=tree)
                   for p in args.policies.split(",")}
        ref = reports.get("blend", next(iter(reports.values())))
        for p, r in reports.items():
            rows.append({"trace": name, "policy": p, "throughput": round(r.throughput, 1),
                         "vs_blend": round(r.throughput / ref.throughput, 4),
                         "makespan_over_optimal": round(r.makespan / r.optimal_time, 4),
                         "sharing": round(r.achieved_sharing, 4), "optimal_sharing": round(r.optimal_sharing, 4),
                         "density_std": round(r.density_std, 3)})
            print("  ".join(f"{rows[-1][c]!s:>10}" for c in COLUMNS), flush=True)
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=COLUMNS)
            w.writeheader()
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
