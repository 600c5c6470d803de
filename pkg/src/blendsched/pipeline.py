"""End-to-end helpers: trace pools, analog workloads and one-call policy runs."""

from __future__ import annotations

from dataclasses import replace
from typing import Sequence

from .cost_model import HardwareConfig, ModelConfig
from .engine_sim import OverlapModel, SimReport, simulate
from .prefix_tree import Request, SortedTree, prepare_tree
from .scheduler import SchedConfig, build_schedule, form_steps
from .workload import MixSpec, TraceSpec, default_trace_records, default_trace_specs, load_trace, \
    records_to_requests, synthesize

# (target density, target sharing) of the four representative workloads
TRACE_ANALOGS: dict[str, tuple[float, float]] = {
    "trace1": (1.37, 0.33),
    "trace2": (0.90, 0.30),
    "trace3": (1.25, 0.08),
    "trace4": (1.05, 0.10),
}

ROLES = {"compute": "chat", "memory": "video", "sharing": "benchmark"}


def default_pools(seed: int = 0, scale: float = 1.0, directory: str | None = None) -> dict[str, list[Request]]:
    """Requests of the three bundled trace analogs, keyed by mixing role.

    With ``directory`` the traces are read from JSONL files written by
    ``write_default_traces``; otherwise they are generated in memory.
    """
    specs = default_trace_specs(directory)
    if directory is not None:
        return {role: load_trace(specs[name].path, specs[name], seed) for role, name in ROLES.items()}
    records = default_trace_records(seed, scale)
    return {role: records_to_requests(records[name], specs[name], seed) for role, name in ROLES.items()}


def mix_spec(target_density: float, target_sharing: float, total_requests: int = 10_000,
             seed: int = 0, tolerance: float = 0.02, directory: str | None = None) -> MixSpec:
    specs: dict[str, TraceSpec] = default_trace_specs(directory)
    return MixSpec(target_density, target_sharing, specs["chat"], specs["video"], specs["benchmark"],
                   total_requests=total_requests, seed=seed, tolerance=tolerance)


def analog_workload(name: str, mc: ModelConfig, hc: HardwareConfig, pools=None,
                    total_requests: int = 10_000, seed: int = 0) -> tuple[list[Request], dict]:
    density, sharing = TRACE_ANALOGS[name]
    pools = pools if pools is not None else default_pools(seed)
    return synthesize(mix_spec(density, sharing, total_requests, seed), mc, hc, pools)


def run_policy(
    requests: Sequence[Request],
    mc: ModelConfig,
    hc: HardwareConfig,
    cfg: SchedConfig | None = None,
    overlap: OverlapModel | None = None,
    tree: SortedTree | None = None,
    **overrides,
) -> SimReport:
    """Schedule ``requests`` under ``cfg`` (with keyword overrides) and simulate the stream."""
    cfg = replace(cfg or SchedConfig(), **overrides)
    if tree is None:
        tree = prepare_tree(requests, mc, hc, cfg.sample_prob, cfg.seed, cfg.waste_threshold,
                            cfg.default_output_len)
    order, est, plan = build_schedule(requests, mc, hc, cfg, tree)
    steps = form_steps(order, requests, mc, hc, cfg, est, plan)
    return simulate(steps, requests, mc, hc, overlap, optimal_sharing=tree.optimal_sharing)
