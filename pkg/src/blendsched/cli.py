"""Command-line pipeline: traces -> synth -> schedule -> simulate -> compare / sweep.

Every option can also come from a flat JSON config file (``--config``) whose
keys are the option names with underscores; explicit flags win over the file,
and the file wins over built-in defaults. Each command writes the fully
resolved configuration next to its primary output as ``<out>.config.json``.

Exit codes: 0 success, 1 internal invariant violation, 2 user or input error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .cost_model import HardwareConfig, ModelConfig, load_hardware_config, load_model_config
from .engine_sim import OverlapModel, SimulationError, simulate, write_timeline_csv
from .pipeline import default_pools, mix_spec
from .prefix_tree import dump_tree, prepare_tree, tree_sharing, build
from .scheduler import SchedConfig, build_schedule, form_steps, read_steps, write_steps
from .workload import (
    InfeasibleMix,
    MixSpec,
    default_trace_specs,
    describe,
    load_workload,
    subsample,
    synthesize,
    write_default_traces,
    write_workload,
)

MODEL_KEYS = [f.name for f in fields(ModelConfig)]
HARDWARE_KEYS = [f.name for f in fields(HardwareConfig)]
SCHED_KEYS = [f.name for f in fields(SchedConfig)]
MIX_KEYS = ["target_density", "target_sharing", "total_requests", "tolerance", "max_iter"]

DEFAULTS: dict[str, Any] = {
    **{f.name: f.default for f in fields(SchedConfig)},
    "model_config": None,
    "hardware_config": None,
    "overlap_mode": "perfect",
    "interference_table": None,
    "total_requests": 10_000,
    "tolerance": 0.02,
    "max_iter": 40,
    "scale": None,
    "trace_seed": 0,
    "trace_scale": 1.0,
    "densities": "0.80:1.40:0.05",
    "sharings": "0.05:0.45:0.10",
    "policies": "blend,dfs",
    "parallel": 1,
}


class UserError(Exception):
    """Bad input from the command line, a config file or an input file."""


# -- config resolution ----------------------------------------------------------

def _model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model / hardware")
    g.add_argument("--model-config", help="JSON model config (default: bundled Llama-3.1-8B)")
    g.add_argument("--hardware-config", help="JSON hardware config (default: bundled A100 80GB)")
    for key in MODEL_KEYS:
        g.add_argument("--" + key.replace("_", "-"), type=float)
    for key in HARDWARE_KEYS:
        g.add_argument("--" + key.replace("_", "-"), type=float)


def _sched_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("scheduler")
    g.add_argument("--granularity", type=int)
    g.add_argument("--chunk-budget", type=int)
    g.add_argument("--policy", choices=["blend", "dfs", "fcfs", "random"])
    g.add_argument("--waste-threshold", type=float)
    g.add_argument("--sample-prob", type=float)
    g.add_argument("--admission", choices=["reserve", "occupancy"])
    g.add_argument("--budget-mode", choices=["paced", "fixed"])
    g.add_argument("--default-output-len", type=float)


def _overlap_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("overlap model")
    g.add_argument("--overlap-mode", choices=["sequential", "perfect", "interference"])
    g.add_argument("--interference-table",
                   help="JSON file with [[compute_fraction, slowdown], ...] points")


def _mix_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("workload mix")
    g.add_argument("--target-density", type=float)
    g.add_argument("--target-sharing", type=float)
    g.add_argument("--total-requests", type=int)
    g.add_argument("--tolerance", type=float)
    g.add_argument("--max-iter", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blendsched", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="subcommand")

    def common(p):
        p.add_argument("--config", help="flat JSON config file; flags override its keys")
        p.add_argument("--seed", type=int)
        return p

    p = common(sub.add_parser("traces", help="write the bundled trace analogs as JSONL"))
    p.add_argument("--out", help="output directory")
    p.add_argument("--trace-scale", type=float, help="fraction of the default trace sizes")

    p = common(sub.add_parser("synth", help="mix traces into a workload with target density and sharing"))
    p.add_argument("--traces", help="directory written by 'traces' (default: generate in memory)")
    p.add_argument("--out", help="workload JSONL path")
    _mix_flags(p)
    _model_flags(p)

    p = common(sub.add_parser("describe", help="summarize a workload"))
    p.add_argument("--workload")
    p.add_argument("--out", help="write the summary JSON here")
    _model_flags(p)

    p = common(sub.add_parser("schedule", help="build the prefix tree and emit a step schedule"))
    p.add_argument("--workload")
    p.add_argument("--out", help="schedule JSONL path")
    p.add_argument("--tree-dump", help="tree dump path (default: <out>.tree.txt)")
    p.add_argument("--scale", type=float, help="uniformly subsample the workload to this fraction")
    _sched_flags(p)
    _model_flags(p)

    p = common(sub.add_parser("simulate", help="replay a schedule on the simulated backend"))
    p.add_argument("--schedule")
    p.add_argument("--workload", help="workload JSONL (default: the one recorded with the schedule)")
    p.add_argument("--out", help="report JSON path")
    p.add_argument("--timeline", help="timeline CSV path (default: <out>.timeline.csv)")
    _overlap_flags(p)
    _model_flags(p)

    p = common(sub.add_parser("compare", help="tabulate simulate reports of one workload"))
    p.add_argument("reports", nargs="*", help="report JSON files (at least two)")
    p.add_argument("--out", help="comparison CSV path")

    p = common(sub.add_parser("sweep", help="grid over (density, sharing) comparing policies"))
    p.add_argument("--out", help="sweep CSV path")
    p.add_argument("--traces", help="directory written by 'traces' (default: generate in memory)")
    p.add_argument("--densities", help="start:stop:step (inclusive) or comma list")
    p.add_argument("--sharings", help="start:stop:step (inclusive) or comma list")
    p.add_argument("--policies", help="comma list of policies")
    p.add_argument("--parallel", type=int, help="worker processes")
    _mix_flags(p)
    _sched_flags(p)
    _overlap_flags(p)
    _model_flags(p)
    return parser


REQUIRED = {
    "traces": ("out",),
    "synth": ("out",),
    "describe": ("workload",),
    "schedule": ("workload", "out"),
    "simulate": ("schedule", "out"),
    "compare": ("reports", "out"),
    "sweep": ("out",),
}


def resolve(args: argparse.Namespace) -> dict[str, Any]:
    """Merge built-in defaults, the ``--config`` file and explicit flags."""
    cfg: dict[str, Any] = {}
    given = {k: v for k, v in vars(args).items() if k != "config"}
    file_cfg: dict[str, Any] = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise UserError(f"config file not found: {path}")
        try:
            file_cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UserError(f"{path}: malformed JSON ({exc.msg})") from None
        if not isinstance(file_cfg, dict):
            raise UserError(f"{path}: config must be a JSON object")
    for key in set(DEFAULTS) | set(file_cfg) | set(given):
        if given.get(key) not in (None, []):
            cfg[key] = given[key]
        elif key in file_cfg:
            cfg[key] = file_cfg[key]
        else:
            cfg[key] = DEFAULTS.get(key)
    cfg["subcommand"] = args.subcommand
    for key in REQUIRED[args.subcommand]:
        if not cfg.get(key):
            raise UserError(f"--{key.replace('_', '-')} is required (flag or config key)")
    if cfg.get("seed") is None:
        cfg["seed"] = 0
    return cfg


def _configs(cfg: dict) -> tuple[ModelConfig, HardwareConfig]:
    mc = load_model_config(cfg.get("model_config"), {k: cfg.get(k) for k in MODEL_KEYS})
    hc = load_hardware_config(cfg.get("hardware_config"), {k: cfg.get(k) for k in HARDWARE_KEYS})
    for k in MODEL_KEYS:
        cfg[k] = getattr(mc, k)
    for k in HARDWARE_KEYS:
        cfg[k] = getattr(hc, k)
    return mc, hc


def _sched(cfg: dict) -> SchedConfig:
    return SchedConfig(**{k: cfg[k] for k in SCHED_KEYS if cfg.get(k) is not None})


def _overlap(cfg: dict) -> OverlapModel:
    table = cfg.get("interference_table")
    if isinstance(table, str):
        path = Path(table)
        if not path.exists():
            raise UserError(f"interference table not found: {path}")
        table = json.loads(path.read_text())
        cfg["interference_table"] = table
    return OverlapModel.from_dict({"mode": cfg.get("overlap_mode") or "perfect", "table": table})


def _write_config(cfg: dict, out: str | Path) -> None:
    Path(str(out) + ".config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True, default=str) + "\n")


def _digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _grid(spec: str | Sequence[float]) -> list[float]:
    if isinstance(spec, (list, tuple)):
        return [float(x) for x in spec]
    if ":" in spec:
        try:
            start, stop, step = (float(x) for x in spec.split(":"))
        except ValueError:
            raise UserError(f"bad grid spec {spec!r}; expected start:stop:step") from None
        if step <= 0:
            raise UserError("grid step must be positive")
        n = int(round((stop - start) / step)) + 1
        return [round(start + i * step, 10) for i in range(n)]
    return [float(x) for x in spec.split(",") if x.strip()]


def _mix(cfg: dict) -> MixSpec:
    for key in ("target_density", "target_sharing"):
        if cfg.get(key) is None:
            raise UserError(f"--{key.replace('_', '-')} is required")
    spec = mix_spec(cfg["target_density"], cfg["target_sharing"], cfg["total_requests"], cfg["seed"],
                    cfg["tolerance"], cfg.get("traces"))
    spec.max_iter = cfg["max_iter"]
    return spec


def _pools(cfg: dict):
    traces = cfg.get("traces")
    if traces is not None:
        specs = default_trace_specs(traces)
        for spec in specs.values():
            if not Path(spec.path).exists():
                raise UserError(f"trace file not found: {spec.path}")
    return default_pools(cfg["trace_seed"] if cfg.get("trace_seed") is not None else 0,
                         cfg.get("trace_scale") or 1.0, traces)


# -- commands ----------------------------------------------------------------

def cmd_traces(cfg: dict) -> int:
    specs = write_default_traces(cfg["out"], cfg["seed"], cfg.get("trace_scale") or 1.0)
    cfg["trace_seed"] = cfg["seed"]
    _write_config(cfg, Path(cfg["out"]) / "traces")
    for name, spec in specs.items():
        print(f"{name}: {spec.path}")
    return 0


def cmd_synth(cfg: dict) -> int:
    mc, hc = _configs(cfg)
    cfg["trace_seed"] = cfg["seed"]
    mix = _mix(cfg)
    requests, meta = synthesize(mix, mc, hc, _pools(cfg))
    write_workload(cfg["out"], requests, meta)
    _write_config(cfg, cfg["out"])
    print(f"achieved density {meta['achieved_density']:.4f} (target {mix.target_density}), "
          f"sharing {meta['achieved_sharing']:.4f} (target {mix.target_sharing}); counts {meta['counts']}")
    return 0


def cmd_describe(cfg: dict) -> int:
    mc, hc = _configs(cfg)
    summary = describe(load_workload(cfg["workload"]), mc, hc)
    text = json.dumps(summary, indent=2, sort_keys=True) + "\n"
    if cfg.get("out"):
        Path(cfg["out"]).write_text(text)
        _write_config(cfg, cfg["out"])
    print(text, end="")
    return 0


def cmd_schedule(cfg: dict) -> int:
    mc, hc = _configs(cfg)
    sched = _sched(cfg)
    workload = cfg["workload"]
    requests = load_workload(workload)
    if not requests:
        raise UserError(f"workload {workload} is empty")
    if cfg.get("scale") is not None:
        requests = subsample(requests, cfg["scale"], sched.seed)
        workload = str(cfg["out"]) + ".workload.jsonl"
        write_workload(workload, requests)
    tree = prepare_tree(requests, mc, hc, sched.sample_prob, sched.seed, sched.waste_threshold,
                        sched.default_output_len)
    order, est, plan = build_schedule(requests, mc, hc, sched, tree)
    n = write_steps(cfg["out"], form_steps(order, requests, mc, hc, sched, est, plan))
    tree_path = cfg.get("tree_dump") or str(cfg["out"]) + ".tree.txt"
    Path(tree_path).write_text(dump_tree(tree))
    meta = {
        "policy": sched.policy,
        "workload": str(workload),
        "workload_digest": _digest(workload),
        "optimal_sharing": tree.optimal_sharing,
        "num_steps": n,
        "num_requests": len(requests),
        "plan_comp_flops": plan.comp_flops,
        "plan_mem_bytes": plan.mem_bytes,
    }
    Path(str(cfg["out"]) + ".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    _write_config(cfg, cfg["out"])
    print(f"{sched.policy}: {n} steps for {len(requests)} requests; s_o = {tree.optimal_sharing:.4f}")
    return 0


def cmd_simulate(cfg: dict) -> int:
    mc, hc = _configs(cfg)
    overlap = _overlap(cfg)
    sched_path = Path(cfg["schedule"])
    if not sched_path.exists():
        raise UserError(f"schedule file not found: {sched_path}")
    meta_path = Path(str(sched_path) + ".meta.json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    workload = cfg.get("workload") or meta.get("workload")
    if workload is None:
        raise UserError("--workload is required when the schedule has no metadata")
    cfg["workload"] = workload
    requests = load_workload(workload)
    s_o = meta.get("optimal_sharing")
    if s_o is None:
        s_o = tree_sharing(build(requests), mc) if requests else 0.0
    report = simulate(read_steps(sched_path), requests, mc, hc, overlap, optimal_sharing=s_o)
    summary = report.summary()
    summary["policy"] = meta.get("policy", "unknown")
    summary["workload_digest"] = _digest(workload)
    Path(cfg["out"]).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    timeline = cfg.get("timeline") or str(cfg["out"]) + ".timeline.csv"
    write_timeline_csv(report, timeline)
    _write_config(cfg, cfg["out"])
    print(f"{summary['policy']}: makespan {report.makespan:.3f} s, throughput {report.throughput:.1f} tok/s, "
          f"sharing {report.achieved_sharing:.4f} of optimal {report.optimal_sharing:.4f}, "
          f"T_o/makespan {report.optimal_ratio:.4f}")
    return 0


COMPARE_COLUMNS = ("label", "policy", "throughput", "throughput_ratio", "makespan", "achieved_sharing",
                   "optimal_sharing", "sharing_ratio", "optimal_ratio")


def compare_rows(reports: Sequence[dict], labels: Sequence[str]) -> list[dict]:
    if len(reports) < 2:
        raise UserError("compare needs at least two reports")
    digests = {r.get("workload_digest") for r in reports}
    if len(digests) != 1:
        raise UserError("reports were produced from different workloads")
    base = reports[0]
    rows = []
    for label, r in zip(labels, reports):
        rows.append({
            "label": label,
            "policy": r.get("policy", "unknown"),
            "throughput": r["throughput"],
            "throughput_ratio": r["throughput"] / base["throughput"] if base["throughput"] else 1.0,
            "makespan": r["makespan"],
            "achieved_sharing": r["achieved_sharing"],
            "optimal_sharing": r["optimal_sharing"],
            "sharing_ratio": (r["achieved_sharing"] / base["achieved_sharing"]
                              if base["achieved_sharing"] else 1.0),
            "optimal_ratio": r["optimal_ratio"] / base["optimal_ratio"] if base["optimal_ratio"] else 1.0,
        })
    return rows


def cmd_compare(cfg: dict) -> int:
    reports = []
    for path in cfg["reports"]:
        if not Path(path).exists():
            raise UserError(f"report file not found: {path}")
        reports.append(json.loads(Path(path).read_text()))
    rows = compare_rows(reports, [Path(p).stem for p in cfg["reports"]])
    with open(cfg["out"], "w", newline="") as fh:
        w = csv.DictWriter(fh, COMPARE_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    _write_config(cfg, cfg["out"])
    print(f"{'label':<24}{'policy':<8}{'tok/s':>12}{'ratio':>8}{'sharing':>9}{'T_o ratio':>10}")
    for row in rows:
        print(f"{row['label']:<24}{row['policy']:<8}{row['throughput']:>12.1f}{row['throughput_ratio']:>8.3f}"
              f"{row['achieved_sharing']:>9.4f}{row['optimal_ratio']:>10.3f}")
    return 0


_SWEEP_STATE: dict[str, Any] = {}


def _sweep_init(cfg: dict) -> None:
    mc, hc = _configs(dict(cfg))
    _SWEEP_STATE.update(cfg=cfg, mc=mc, hc=hc, pools=_pools(cfg))


def _sweep_point(point: tuple[float, float]) -> dict:
    from .pipeline import run_policy

    cfg, mc, hc, pools = (_SWEEP_STATE[k] for k in ("cfg", "mc", "hc", "pools"))
    density, sharing = point
    row: dict[str, Any] = {"target_density": density, "target_sharing": sharing}
    try:
        mix = mix_spec(density, sharing, cfg["total_requests"], cfg["seed"], cfg["tolerance"], cfg.get("traces"))
        requests, meta = synthesize(mix, mc, hc, pools)
    except InfeasibleMix as exc:
        row["status"] = f"infeasible: {exc}"
        return row
    row.update(status="ok", achieved_density=meta["achieved_density"], achieved_sharing=meta["achieved_sharing"])
    sched = _sched(cfg)
    overlap = _overlap(dict(cfg))
    tree = prepare_tree(requests, mc, hc, sched.sample_prob, sched.seed, sched.waste_threshold,
                        sched.default_output_len)
    for policy in cfg["policy_list"]:
        rep = run_policy(requests, mc, hc, sched, overlap, tree, policy=policy)
        row[f"throughput_{policy}"] = rep.throughput
        row[f"optimal_ratio_{policy}"] = rep.optimal_ratio
        row[f"sharing_{policy}"] = rep.achieved_sharing
    base = [row[f"throughput_{p}"] for p in cfg["policy_list"] if p != "blend"]
    if "blend" in cfg["policy_list"] and base:
        row["gain_vs_best_baseline"] = row["throughput_blend"] / max(base) - 1.0
    return row


def cmd_sweep(cfg: dict) -> int:
    densities, sharings = _grid(cfg["densities"]), _grid(cfg["sharings"])
    cfg["policy_list"] = [p.strip() for p in str(cfg["policies"]).split(",") if p.strip()]
    for p in cfg["policy_list"]:
        if p not in ("blend", "dfs", "fcfs", "random"):
            raise UserError(f"unknown policy {p!r}")
    cfg["trace_seed"] = cfg["seed"]
    _sched(cfg)  # validate before fanning out
    points = [(d, s) for d in densities for s in sharings]
    if cfg["parallel"] and cfg["parallel"] > 1:
        with ProcessPoolExecutor(cfg["parallel"], initializer=_sweep_init, initargs=(cfg,)) as ex:
            rows = list(ex.map(_sweep_point, points))
    else:
        _sweep_init(cfg)
        rows = [_sweep_point(p) for p in points]
    columns = ["target_density", "target_sharing", "status", "achieved_density", "achieved_sharing"]
    for p in cfg["policy_list"]:
        columns += [f"throughput_{p}", f"optimal_ratio_{p}", f"sharing_{p}"]
    if "blend" in cfg["policy_list"] and len(cfg["policy_list"]) > 1:
        columns.append("gain_vs_best_baseline")
    with open(cfg["out"], "w", newline="") as fh:
        w = csv.DictWriter(fh, columns, restval="")
        w.writeheader()
        w.writerows(rows)
    _write_config(cfg, cfg["out"])
    gains = [r["gain_vs_best_baseline"] for r in rows if "gain_vs_best_baseline" in r]
    ok = sum(1 for r in rows if r["status"] == "ok")
    msg = f"{len(rows)} grid points ({ok} feasible)"
    if gains:
        msg += f"; blend gain over best baseline {min(gains):+.1%} .. {max(gains):+.1%} (median {np.median(gains):+.1%})"
    print(msg)
    return 0


COMMANDS = {
    "traces": cmd_traces,
    "synth": cmd_synth,
    "describe": cmd_describe,
    "schedule": cmd_schedule,
    "simulate": cmd_simulate,
    "compare": cmd_compare,
    "sweep": cmd_sweep,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve(args)
        return COMMANDS[args.subcommand](cfg)
    except SimulationError as exc:
        print(f"error: inconsistent schedule: {exc}", file=sys.stderr)
        return 1
    except (UserError, InfeasibleMix, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (RuntimeError, AssertionError) as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
