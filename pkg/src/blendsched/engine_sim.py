"""Discrete-step simulated backend.

Replays a ``StepBatch`` stream against its own KV accounting and a trie of
computed prompt tokens, charges each step's compute and memory time and
combines them through an overlap model.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .cache import RuntimeCache
from .cost_model import (
    AggregateCost,
    HardwareConfig,
    ModelConfig,
    comp_flops,
    mem_bytes_exact,
    optimal_time,
)
from .prefix_tree import Request, build, tree_sharing
from .scheduler import StepBatch

TIMELINE_COLUMNS = ("step", "comp_s", "mem_s", "density", "kv_bytes",
                    "prefill_tokens", "decode_tokens", "cache_hit_tokens")


class SimulationError(RuntimeError):
    """The step stream is inconsistent with the requests or with itself."""

    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass(frozen=True)
class OverlapModel:
    mode: str = "perfect"  # sequential | perfect | interference
    table: tuple[tuple[float, float], ...] = ((0.0, 1.0), (1.0, 1.0))

    def __post_init__(self) -> None:
        if self.mode not in ("sequential", "perfect", "interference"):
            raise ValueError(f"unknown overlap mode {self.mode!r}")
        xs = [x for x, _ in self.table]
        if len(self.table) < 2 or xs != sorted(xs) or xs[0] > 0 or xs[-1] < 1:
            raise ValueError("interference table must be sorted and span compute fractions 0..1")
        if any(s < 1 for _, s in self.table):
            raise ValueError("interference slowdown factors must be >= 1")

    def combine(self, comp: float, mem: float) -> float:
        if self.mode == "sequential":
            return comp + mem
        if self.mode == "perfect" or comp == 0 or mem == 0:
            return max(comp, mem)
        xs, ys = zip(*self.table)
        slow = float(np.interp(comp / (comp + mem), xs, ys))
        return min(max(comp, mem) * slow, comp + mem)

    @classmethod
    def from_dict(cls, d: dict) -> "OverlapModel":
        table = d.get("table")
        return cls(d.get("mode", "perfect"),
                   tuple(tuple(map(float, p)) for p in table) if table else ((0.0, 1.0), (1.0, 1.0)))


@dataclass
class SimReport:
    makespan: float = 0.0
    throughput: float = 0.0
    achieved_sharing: float = 0.0
    optimal_sharing: float = 0.0
    optimal_time: float = 0.0
    t_comp: float = 0.0
    t_mem: float = 0.0
    num_steps: int = 0
    num_requests: int = 0
    input_tokens: int = 0
    output_tokens: int = 0
    prefill_tokens: int = 0
    cache_hit_tokens: int = 0
    recompute_tokens: int = 0
    retractions: int = 0
    retracted_requests: int = 0
    density_std: float = 0.0
    overlap_mode: str = "perfect"
    timeline: dict[str, list] = field(default_factory=lambda: {c: [] for c in TIMELINE_COLUMNS}, repr=False)

    @property
    def optimal_ratio(self) -> float:
        """``T_o / makespan``: fraction of the achievable optimal throughput."""
        return self.optimal_time / self.makespan if self.makespan else 1.0

    def summary(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "timeline"}
        d["optimal_ratio"] = self.optimal_ratio
        d["sharing_fraction_of_optimal"] = (self.achieved_sharing / self.optimal_sharing
                                            if self.optimal_sharing else 1.0)
        return d

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"


def simulate(
    steps: Iterable[StepBatch],
    requests: Sequence[Request],
    mc: ModelConfig,
    hc: HardwareConfig,
    overlap: OverlapModel | None = None,
    optimal_sharing: float | None = None,
    check_kv: bool = True,
) -> SimReport:
    """Replay ``steps`` and assemble a ``SimReport``.

    ``optimal_sharing`` is the tree-optimal ``s_o`` of the workload; it is
    recomputed from a fresh prefix tree when omitted.
    """
    overlap = overlap or OverlapModel()
    by_id = {r.id: r for r in requests}
    index = {rid: i for i, rid in enumerate(by_id)}
    n = len(by_id)
    kv = np.zeros(n, dtype=np.int64)  # resident tokens per request
    phase = np.zeros(n, dtype=np.int8)  # 0 queued, 1 prefill, 2 decode, 3 done
    generated = np.zeros(n, dtype=np.int64)
    pos = np.zeros(n, dtype=np.int64)
    target = np.array([r.prompt_len for r in by_id.values()], dtype=np.int64)
    recompute = np.zeros(n, dtype=bool)
    retracted_ever = np.zeros(n, dtype=bool)
    computed = RuntimeCache()
    kvb = mc.kv_bytes_per_token
    two_p = 2 * mc.param_count
    attn = 4 * mc.hidden_dim * mc.num_layers
    peak = hc.flops_per_second
    bw = hc.bytes_per_second
    report = SimReport(overlap_mode=overlap.mode, num_requests=n)
    tl = report.timeline
    saved_flops = 0
    resident = 0
    densities = []

    for sb in steps:
        k = sb.step
        for rid in sb.retracted_ids:
            i = index.get(rid)
            if i is None or phase[i] not in (1, 2):
                raise SimulationError(k, f"retraction of request {rid} that is not in flight")
            resident -= int(kv[i])
            generated[i] = kv[i] - by_id[rid].prompt_len
            target[i] = kv[i]
            kv[i] = 0
            pos[i] = 0
            phase[i] = 0
            recompute[i] = True
            retracted_ever[i] = True
            report.retractions += 1
        # decode first: these requests finished prefill in an earlier step
        dec = np.fromiter((index[r] for r in sb.decode_ids), dtype=np.int64, count=len(sb.decode_ids))
        if len(dec) and np.any(phase[dec] != 2):
            bad = sb.decode_ids[int(np.argmax(phase[dec] != 2))]
            raise SimulationError(k, f"decode of request {bad} that is not decoding")
        kv[dec] += 1
        generated[dec] += 1
        mem_tokens = int(kv[dec].sum()) if len(dec) else 0
        resident += len(dec)
        attn_flops = 0
        prefill_tokens = 0
        hits = 0
        for rid, a, b in sb.prefill_chunks:
            i = index.get(rid)
            if i is None:
                raise SimulationError(k, f"unknown request {rid}")
            req = by_id[rid]
            if phase[i] == 0:
                # admission: the chunk start is the cache hit
                if recompute[i]:
                    if a != 0:
                        raise SimulationError(k, f"recompute of request {rid} must start at 0")
                else:
                    have = computed.cached_prefix(req.prompt)
                    if a > have:
                        raise SimulationError(k, f"request {rid} claims a hit of {a} tokens but only "
                                                 f"{have} were ever computed")
                    hits += a
                    saved_flops += two_p * a + attn * a * a
                phase[i] = 1
                kv[i] = target[i]
                resident += int(target[i])
            elif phase[i] != 1 or a != pos[i]:
                raise SimulationError(k, f"chunk {a}..{b} of request {rid} is out of sequence")
            if b > target[i] or b < a:
                raise SimulationError(k, f"chunk {a}..{b} of request {rid} exceeds its context")
            pos[i] = b
            prefill_tokens += b - a
            attn_flops += attn * (b * b - a * a)
            if recompute[i]:
                report.recompute_tokens += b - a
            elif b > a:
                computed.insert(req.prompt[:b])
            if b == target[i]:
                phase[i] = 2
        if check_kv and resident * kvb != sb.active_kv_bytes:
            raise SimulationError(k, f"active KV {sb.active_kv_bytes} bytes disagrees with replayed "
                                     f"{resident * kvb} bytes")
        if sb.active_kv_bytes > hc.kv_capacity_bytes:
            raise SimulationError(k, "active KV exceeds memory capacity")
        # completions
        if len(dec):
            outs = np.fromiter((by_id[r].output_len for r in sb.decode_ids), dtype=np.int64, count=len(dec))
            fin = dec[generated[dec] >= outs]
            if len(fin):
                resident -= int(kv[fin].sum())
                kv[fin] = 0
                phase[fin] = 3
        # prefill-complete requests with nothing to decode finish immediately
        for rid, a, b in sb.prefill_chunks:
            i = index[rid]
            if phase[i] == 2 and generated[i] >= by_id[rid].output_len:
                resident -= int(kv[i])
                kv[i] = 0
                phase[i] = 3
        kv_now = sb.active_kv_bytes
        comp = (sb.gemm_token_count * two_p + attn_flops) / peak
        mem = mem_tokens * kvb / bw
        report.makespan += overlap.combine(comp, mem)
        report.prefill_tokens += prefill_tokens
        report.cache_hit_tokens += hits
        dens = comp / mem if mem > 0 else math.inf
        if mem > 0 or comp > 0:
            densities.append(dens)
        tl["step"].append(k)
        tl["comp_s"].append(comp)
        tl["mem_s"].append(mem)
        tl["density"].append(dens)
        tl["kv_bytes"].append(kv_now)
        tl["prefill_tokens"].append(prefill_tokens)
        tl["decode_tokens"].append(len(dec))
        tl["cache_hit_tokens"].append(hits)
        report.num_steps += 1

    if n and np.any(phase != 3):
        left = [rid for rid, i in index.items() if phase[i] != 3][:5]
        raise SimulationError(report.num_steps, f"stream ended with unfinished requests {left}")
    total_flops = sum(comp_flops(r.prompt_len, r.output_len, mc) for r in requests)
    report.t_comp = total_flops / peak
    report.t_mem = sum(mem_bytes_exact(r.prompt_len, r.output_len, mc) for r in requests) / bw
    report.achieved_sharing = saved_flops / total_flops if total_flops else 0.0
    if optimal_sharing is None:
        optimal_sharing = tree_sharing(build(requests), mc) if requests else 0.0
    report.optimal_sharing = optimal_sharing
    report.optimal_time = optimal_time(AggregateCost(report.t_comp, report.t_mem, optimal_sharing))
    report.input_tokens = sum(r.prompt_len for r in requests)
    report.output_tokens = sum(r.output_len for r in requests)
    report.throughput = (report.input_tokens + report.output_tokens) / report.makespan if report.makespan else 0.0
    report.retracted_requests = int(retracted_ever.sum())
    finite = [x for x in densities if math.isfinite(x)]
    report.density_std = float(np.std(finite)) if finite else 0.0
    return report


def resource_timeline(report: SimReport) -> list[dict]:
    tl = report.timeline
    return [dict(zip(TIMELINE_COLUMNS, row)) for row in zip(*(tl[c] for c in TIMELINE_COLUMNS))]


def write_timeline_csv(report: SimReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TIMELINE_COLUMNS)
        tl = report.timeline
        for row in zip(*(tl[c] for c in TIMELINE_COLUMNS)):
            w.writerow([repr(x) if isinstance(x, float) else x for x in row])
