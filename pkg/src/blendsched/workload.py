"""Trace ingestion and synthetic multi-modal workload generation.

Traces are JSONL, one record per line::

    {"id": 3, "prompt_len": 812, "output_len": 140, "modality": "text"}
    {"id": 4, "prompt_tokens": [1203, 88, ...], "output_len": 2, "modality": "benchmark"}
    {"id": 5, "prompt_len": 64, "frames": 180, "modality": "video"}

A workload is a mix of one compute-intensive trace, one memory-intensive
(video generation) trace and a high-sharing benchmark trace, with per-trace
counts solved so that the mix hits a target compute density and prefix
sharing ratio.
"""

from __future__ import annotations

import json
import math
import random
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .cache import RuntimeCache
from .cost_model import HardwareConfig, ModelConfig, decode_flops, mem_time, prefill_flops
from .prefix_tree import Request, annotate_density, build, set_true_lengths, tree_sharing

TOKENS_PER_FRAME = 256
TOKEN_LOW, TOKEN_HIGH = 1000, 32000
KNOWN_OUTPUT_MODALITIES = frozenset({"video", "image"})

# Shared int objects keep materialized prompts at one pointer per token.
_TOKEN_POOL = list(range(1 << 16))


def _intern(tokens: Iterable[int]) -> tuple:
    pool = _TOKEN_POOL
    return tuple(pool[t] if 0 <= t < 65536 else t for t in tokens)


def _rng(seed: int, *salt: str) -> np.random.Generator:
    key = zlib.crc32("/".join(salt).encode()) if salt else 0
    return np.random.default_rng([seed, key])


@dataclass
class TraceSpec:
    name: str
    modality: str = "text"
    prompt_source: str = "length-only"  # or "token-ids"
    system_prompt_len: int = 16
    known_output: bool = False
    normalization: float | None = None  # target mean output length
    path: str | None = None

    def __post_init__(self) -> None:
        if self.prompt_source not in ("length-only", "token-ids"):
            raise ValueError(f"unknown prompt_source {self.prompt_source!r}")
        if self.system_prompt_len < 0:
            raise ValueError("system_prompt_len must be non-negative")
        if self.normalization is not None and self.normalization <= 0:
            raise ValueError("normalization target must be positive")


@dataclass
class MixSpec:
    target_density: float
    target_sharing: float
    compute_trace: TraceSpec
    memory_trace: TraceSpec
    sharing_trace: TraceSpec
    total_requests: int = 10_000
    seed: int = 0
    tolerance: float = 0.02
    max_iter: int = 40

    def __post_init__(self) -> None:
        if self.total_requests < 1:
            raise ValueError("total_requests must be at least 1")
        if not 0.0 <= self.target_sharing < 1.0:
            raise ValueError("target_sharing must lie in [0, 1)")
        if self.target_density <= 0:
            raise ValueError("target_density must be positive")


class InfeasibleMix(ValueError):
    """The requested (density, sharing) point cannot be reached with the given traces."""


# -- trace analogs ------------------------------------------------------------

def _lognormal_ints(rng, mean: float, sigma: float, n: int, lo: int, hi: int) -> np.ndarray:
    mu = math.log(mean) - sigma * sigma / 2
    return np.clip(np.rint(rng.lognormal(mu, sigma, n)), lo, hi).astype(int)


def chat_trace_records(n: int, seed: int = 0, mean_prompt: float = 600, mean_output: float = 256,
                       output_sigma: float = 0.6) -> list[dict]:
    """Length-only chatbot trace with lognormal prompt and output lengths."""
    rng = _rng(seed, "chat")
    p = _lognormal_ints(rng, mean_prompt, 0.8, n, 4, 4096)
    d = _lognormal_ints(rng, mean_output, output_sigma, n, 1, 4096)
    return [{"id": i, "prompt_len": int(p[i]), "output_len": int(d[i]), "modality": "text"}
            for i in range(n)]


def video_trace_records(n: int, seed: int = 0, mean_frames: float = 180, frames_sigma: float = 0.35,
                        mean_prompt: float = 80) -> list[dict]:
    """Length-only video-generation trace; output length comes from frame counts."""
    rng = _rng(seed, "video")
    p = _lognormal_ints(rng, mean_prompt, 0.5, n, 8, 512)
    frames = _lognormal_ints(rng, mean_frames, frames_sigma, n, 16, 720)
    return [{"id": i, "prompt_len": int(p[i]), "frames": int(frames[i]), "modality": "video"}
            for i in range(n)]


def benchmark_trace_records(subjects: int = 57, per_subject: int = 200, seed: int = 0,
                            prompt_range: tuple[int, int] = (300, 900),
                            tail_range: tuple[int, int] = (20, 150)) -> list[dict]:
    """Token-id benchmark trace: per-subject few-shot prompts, unique question tails, 2 output tokens."""
    rng = _rng(seed, "benchmark")
    records = []
    for s in range(subjects):
        head = rng.integers(TOKEN_LOW, TOKEN_HIGH, int(rng.integers(*prompt_range, endpoint=True))).tolist()
        for _ in range(per_subject):
            tail = rng.integers(TOKEN_LOW, TOKEN_HIGH, int(rng.integers(*tail_range, endpoint=True))).tolist()
            records.append({"id": len(records), "prompt_tokens": head + tail, "output_len": 2,
                            "modality": "benchmark"})
    return records


def default_trace_specs(directory: str | Path | None = None) -> dict[str, TraceSpec]:
    """Trace specs for the bundled analogs (chat, video, benchmark)."""
    def path(name):
        return None if directory is None else str(Path(directory) / f"{name}.jsonl")
    return {
        "chat": TraceSpec("chat", "text", "length-only", 16, False, 256.0, path("chat")),
        "video": TraceSpec("video", "video", "length-only", 16, True, 16384.0, path("video")),
        "benchmark": TraceSpec("benchmark", "benchmark", "token-ids", 16, False, None, path("benchmark")),
    }


def default_trace_records(seed: int = 0, scale: float = 1.0) -> dict[str, list[dict]]:
    return {
        "chat": chat_trace_records(int(12_000 * scale), seed),
        "video": video_trace_records(int(1_500 * scale), seed),
        "benchmark": benchmark_trace_records(57, max(1, int(210 * scale)), seed),
    }


def write_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, separators=(",", ":")))
            fh.write("\n")


def write_default_traces(directory: str | Path, seed: int = 0, scale: float = 1.0) -> dict[str, TraceSpec]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, records in default_trace_records(seed, scale).items():
        write_jsonl(directory / f"{name}.jsonl", records)
    return default_trace_specs(directory)


# -- loading ------------------------------------------------------------------

def _parse_record(rec: Any, lineno: int) -> dict:
    if not isinstance(rec, dict):
        raise ValueError(f"line {lineno}: record must be a JSON object")
    has_tokens, has_len = "prompt_tokens" in rec, "prompt_len" in rec
    if has_tokens == has_len:
        raise ValueError(f"line {lineno}: exactly one of prompt_tokens / prompt_len is required")
    if has_len and (not isinstance(rec["prompt_len"], int) or rec["prompt_len"] < 0):
        raise ValueError(f"line {lineno}: prompt_len must be a non-negative integer")
    if has_tokens and any((not isinstance(t, int)) or t < 0 for t in rec["prompt_tokens"]):
        raise ValueError(f"line {lineno}: prompt_tokens must be non-negative integers")
    for key in ("output_len", "frames", "id"):
        if key in rec and (not isinstance(rec[key], int) or rec[key] < 0):
            raise ValueError(f"line {lineno}: {key} must be a non-negative integer")
    if "output_len" not in rec and "frames" not in rec:
        raise ValueError(f"line {lineno}: output_len or frames is required")
    return rec


def read_jsonl(path: str | Path) -> list[dict]:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: line {lineno}: malformed JSON ({exc.msg})") from None
            try:
                records.append(_parse_record(rec, lineno))
            except ValueError as exc:
                raise ValueError(f"{path}: {exc}") from None
    return records


def system_prompt(spec: TraceSpec, seed: int = 0) -> tuple:
    rng = _rng(seed, "system", spec.name)
    return _intern(rng.integers(TOKEN_LOW, TOKEN_HIGH, spec.system_prompt_len).tolist())


def records_to_requests(records: Sequence[dict], spec: TraceSpec, seed: int = 0) -> list[Request]:
    """Materialize trace records as requests, prefixing the trace's system prompt."""
    for i, rec in enumerate(records, 1):
        _parse_record(rec, i)
    sys_prompt = system_prompt(spec, seed)
    rng = _rng(seed, "prompts", spec.name)
    raw = np.array([rec["frames"] * TOKENS_PER_FRAME if "frames" in rec else rec["output_len"]
                    for rec in records], dtype=float)
    if spec.normalization is not None and len(raw) and raw.mean() > 0:
        raw = raw * (spec.normalization / raw.mean())
        lengths = np.maximum(1, np.rint(raw)).astype(int)
    else:
        lengths = raw.astype(int)
    out = []
    for i, rec in enumerate(records):
        if "prompt_tokens" in rec:
            body = _intern(rec["prompt_tokens"])
        else:
            body = _intern(rng.integers(TOKEN_LOW, TOKEN_HIGH, rec["prompt_len"]).tolist())
        out.append(Request(
            id=int(rec.get("id", i)),
            prompt=sys_prompt + body,
            output_len=int(lengths[i]),
            known_output=spec.known_output,
            modality=rec.get("modality", spec.modality),
        ))
    return out


def load_trace(path: str | Path, spec: TraceSpec, seed: int = 0) -> list[Request]:
    if not Path(path).exists():
        raise FileNotFoundError(f"trace file not found: {path}")
    return records_to_requests(read_jsonl(path), spec, seed)


# -- workload files -----------------------------------------------------------

def write_workload(path: str | Path, requests: Sequence[Request], metadata: dict | None = None) -> None:
    write_jsonl(path, ({"id": r.id, "prompt_tokens": list(r.prompt), "output_len": r.output_len,
                        "modality": r.modality} for r in requests))
    if metadata is not None:
        Path(str(path) + ".meta.json").write_text(json.dumps(metadata, indent=2, sort_keys=True) + "\n")


def load_workload(path: str | Path) -> list[Request]:
    if not Path(path).exists():
        raise FileNotFoundError(f"workload file not found: {path}")
    out = []
    for rec in read_jsonl(path):
        if "prompt_tokens" not in rec:
            raise ValueError(f"{path}: workload records must carry prompt_tokens (id {rec.get('id')})")
        modality = rec.get("modality", "text")
        d = rec["output_len"] if "output_len" in rec else rec["frames"] * TOKENS_PER_FRAME
        out.append(Request(rec["id"], _intern(rec["prompt_tokens"]), d,
                           modality in KNOWN_OUTPUT_MODALITIES, modality))
    return out


def load_metadata(path: str | Path) -> dict:
    return json.loads(Path(str(path) + ".meta.json").read_text())


# -- metrics ------------------------------------------------------------------

def workload_metrics(requests: Sequence[Request], mc: ModelConfig, hc: HardwareConfig) -> tuple[float, float]:
    """(aggregate density with true lengths, optimal sharing ratio) via the prefix tree."""
    root = build(requests)
    set_true_lengths(root)
    annotate_density(root, mc, hc)
    return root.rho, tree_sharing(root, mc)


class _PoolStats:
    """Prefix sums over a shuffled pool: selecting the first k requests is O(1)."""

    def __init__(self, pool: Sequence[Request], mc: ModelConfig, hc: HardwareConfig):
        self.pool = pool
        n = len(pool)
        self.full = [0] * (n + 1)
        self.dist = [0] * (n + 1)
        self.dec = [0] * (n + 1)
        self.mem = [0.0] * (n + 1)
        cache = RuntimeCache()
        self.item_full, self.item_dist, self.item_dec, self.item_mem = [], [], [], []
        for i, r in enumerate(pool):
            hit, _ = cache.lookup_and_insert(r.prompt)
            f = prefill_flops(0, r.prompt_len, mc)
            dd = prefill_flops(hit, r.prompt_len, mc)
            dc = decode_flops(r.output_len, mc)
            m = mem_time(r.prompt_len, r.output_len, mc, hc)
            self.full[i + 1] = self.full[i] + f
            self.dist[i + 1] = self.dist[i] + dd
            self.dec[i + 1] = self.dec[i] + dc
            self.mem[i + 1] = self.mem[i] + m
            self.item_full.append(f)
            # standalone distinct cost for swapping a single item in
            self.item_dist.append(f)
            self.item_dec.append(dc)
            self.item_mem.append(m)

    def totals(self, k: int) -> tuple[int, int, int, float]:
        return self.full[k], self.dist[k], self.dec[k], self.mem[k]


@dataclass
class _Selection:
    n_share: int
    n_mem: int
    mem_last: int | None = None  # pool index replacing the last memory request


def _shuffled(requests: Sequence[Request], seed: int, salt: str) -> list[Request]:
    order = list(requests)
    random.Random(zlib.crc32(f"{seed}/{salt}".encode())).shuffle(order)
    return order


def synthesize(
    mix: MixSpec,
    mc: ModelConfig,
    hc: HardwareConfig,
    pools: dict[str, Sequence[Request]] | None = None,
) -> tuple[list[Request], dict]:
    """Mix the three traces to reach ``(target_density, target_sharing)``.

    ``pools`` maps ``"compute"``, ``"memory"`` and ``"sharing"`` to loaded
    requests; when omitted the traces are loaded from the specs' paths.
    Returns the requests (ids renumbered, seeded interleave) and metadata.
    """
    if pools is None:
        pools = {}
        for role, spec in (("compute", mix.compute_trace), ("memory", mix.memory_trace),
                           ("sharing", mix.sharing_trace)):
            if spec.path is None:
                raise ValueError(f"{role} trace {spec.name!r} has no path")
            pools[role] = load_trace(spec.path, spec, mix.seed)
    N = mix.total_requests
    comp = _PoolStats(_shuffled(pools["compute"], mix.seed, "compute"), mc, hc)
    memp = _PoolStats(_shuffled(pools["memory"], mix.seed, "memory"), mc, hc)
    share = _PoolStats(_shuffled(pools["sharing"], mix.seed, "sharing"), mc, hc)
    peak = hc.flops_per_second

    def metrics(sel: _Selection) -> tuple[float, float]:
        nc = N - sel.n_share - sel.n_mem
        if nc < 0 or nc > len(comp.pool):
            return math.nan, math.nan
        fc, dc_, ec, mc_ = comp.totals(nc)
        fs, ds, es, ms = share.totals(sel.n_share)
        k = sel.n_mem
        if sel.mem_last is None or k == 0:
            fm, dm, em, mm = memp.totals(k)
        else:
            fm, dm, em, mm = memp.totals(k - 1)
            j = sel.mem_last
            fm, dm, em, mm = (fm + memp.item_full[j], dm + memp.item_dist[j],
                              em + memp.item_dec[j], mm + memp.item_mem[j])
        full = fc + fs + fm
        dist = dc_ + ds + dm
        dec = ec + es + em
        mem = mc_ + ms + mm
        total = full + dec
        dens = math.inf if mem == 0 else (dist + dec) / peak / mem
        return dens, (full - dist) / total if total else 0.0

    def fit_density(sel: _Selection) -> _Selection:
        limit = min(len(memp.pool), N - sel.n_share)
        if metrics(_Selection(sel.n_share, 0))[0] < mix.target_density - mix.tolerance / 2:
            raise InfeasibleMix(
                f"target_density {mix.target_density} exceeds the compute-side density "
                f"{metrics(_Selection(sel.n_share, 0))[0]:.4f} at the required sharing mix")
        if metrics(_Selection(sel.n_share, limit))[0] > mix.target_density:
            raise InfeasibleMix(
                f"target_density {mix.target_density} below what the memory trace can provide "
                f"({len(memp.pool)} requests available)")
        lo, hi = 0, limit  # density(lo) >= target >= density(hi)
        for _ in range(mix.max_iter):
            if hi - lo <= 1:
                break
            mid = (lo + hi) // 2
            if metrics(_Selection(sel.n_share, mid))[0] >= mix.target_density:
                lo = mid
            else:
                hi = mid
        best, best_err = _Selection(sel.n_share, lo), abs(metrics(_Selection(sel.n_share, lo))[0] - mix.target_density)
        for k in {lo, hi} - {0}:
            for j in range(k - 1, len(memp.pool)):
                cand = _Selection(sel.n_share, k, j)
                err = abs(metrics(cand)[0] - mix.target_density)
                if err < best_err:
                    best, best_err = cand, err
        return best

    def fit_sharing(sel: _Selection) -> _Selection:
        limit = min(len(share.pool), N - sel.n_mem)
        top = metrics(_Selection(limit, sel.n_mem, sel.mem_last))[1]
        if top < mix.target_sharing - mix.tolerance / 2:
            raise InfeasibleMix(
                f"target_sharing {mix.target_sharing} exceeds what the sharing trace can provide "
                f"({top:.4f} with {limit} requests)")
        lo, hi = 0, limit  # sharing(lo) < target <= sharing(hi)
        if metrics(_Selection(0, sel.n_mem, sel.mem_last))[1] >= mix.target_sharing:
            return _Selection(0, sel.n_mem, sel.mem_last)
        for _ in range(mix.max_iter):
            if hi - lo <= 1:
                break
            mid = (lo + hi) // 2
            if metrics(_Selection(mid, sel.n_mem, sel.mem_last))[1] >= mix.target_sharing:
                hi = mid
            else:
                lo = mid
        cands = [_Selection(n, sel.n_mem, sel.mem_last) for n in (lo, hi)]
        return min(cands, key=lambda c: abs(metrics(c)[1] - mix.target_sharing))

    sel = fit_density(_Selection(0, 0))
    for _ in range(8):
        sel = fit_sharing(sel)
        sel = fit_density(sel)
        dens, shr = metrics(sel)
        if abs(dens - mix.target_density) <= mix.tolerance / 2 and abs(shr - mix.target_sharing) <= mix.tolerance / 2:
            break

    nc = N - sel.n_share - sel.n_mem
    if nc > len(comp.pool):
        raise InfeasibleMix(f"compute trace too small: need {nc} requests, have {len(comp.pool)}")
    chosen_mem = list(memp.pool[: sel.n_mem])
    if sel.mem_last is not None and sel.n_mem:
        chosen_mem[-1] = memp.pool[sel.mem_last]
    picked = list(comp.pool[:nc]) + chosen_mem + list(share.pool[: sel.n_share])
    picked = _shuffled(picked, mix.seed, "interleave")
    requests = [Request(i, r.prompt, r.output_len, r.known_output, r.modality) for i, r in enumerate(picked)]

    density_, sharing_ = workload_metrics(requests, mc, hc)
    if abs(density_ - mix.target_density) > mix.tolerance or abs(sharing_ - mix.target_sharing) > mix.tolerance:
        raise InfeasibleMix(
            f"could not reach targets (density {density_:.4f} vs {mix.target_density}, "
            f"sharing {sharing_:.4f} vs {mix.target_sharing}) within ±{mix.tolerance}")
    metadata = {
        "achieved_density": density_,
        "achieved_sharing": sharing_,
        "target_density": mix.target_density,
        "target_sharing": mix.target_sharing,
        "seed": mix.seed,
        "total_requests": N,
        "counts": {mix.compute_trace.name: nc, mix.memory_trace.name: sel.n_mem,
                   mix.sharing_trace.name: sel.n_share},
    }
    return requests, metadata


# -- summaries ----------------------------------------------------------------

def _log_histogram(values: Sequence[int]) -> dict:
    top = max(1, max(values))
    edges = [0] + [2 ** i for i in range(0, int(math.ceil(math.log2(top + 1))) + 1)]
    counts, _ = np.histogram(values, bins=edges)
    return {"edges": edges, "counts": counts.tolist()}


def describe(requests: Sequence[Request], mc: ModelConfig, hc: HardwareConfig) -> dict:
    """Counts, log-scale length histograms, per-modality and overall density/sharing."""
    if not requests:
        raise ValueError("cannot describe an empty workload")
    density_, sharing_ = workload_metrics(requests, mc, hc)
    by_mod: dict[str, list[Request]] = {}
    for r in requests:
        by_mod.setdefault(r.modality, []).append(r)
    per_modality = {}
    for mod, reqs in sorted(by_mod.items()):
        d, s = workload_metrics(reqs, mc, hc)
        per_modality[mod] = {
            "count": len(reqs),
            "prompt_tokens": sum(r.prompt_len for r in reqs),
            "output_tokens": sum(r.output_len for r in reqs),
            "density": d,
            "sharing": s,
        }
    return {
        "count": len(requests),
        "prompt_tokens": sum(r.prompt_len for r in requests),
        "output_tokens": sum(r.output_len for r in requests),
        "prompt_len_hist": _log_histogram([r.prompt_len for r in requests]),
        "output_len_hist": _log_histogram([r.output_len for r in requests]),
        "density": density_,
        "sharing": sharing_,
        "per_modality": per_modality,
    }


def subsample(requests: Sequence[Request], scale: float, seed: int = 0) -> list[Request]:
    """Uniformly keep a ``scale`` fraction of each modality (at least one each)."""
    if not 0 < scale <= 1:
        raise ValueError("scale must lie in (0, 1]")
    by_mod: dict[str, list[Request]] = {}
    for r in requests:
        by_mod.setdefault(r.modality, []).append(r)
    keep = set()
    for mod, reqs in sorted(by_mod.items()):
        n = max(1, round(len(reqs) * scale))
        keep.update(r.id for r in _shuffled(reqs, seed, f"scale/{mod}")[:n])
    return [r for r in requests if r.id in keep]
