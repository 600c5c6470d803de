"""Dual-scanner ordering, memory partitioning and continuous-batching step formation.

The ordering stage turns a finalized prefix tree into an annotated request
sequence: each entry records which side (compute-heavy left, memory-heavy
right) it was drawn for and the memory partition in force at that moment.
``form_steps`` then replays the sequence as a continuous-batching engine
would: per-side admission against the partition, chunked prefill under a
per-step budget, one decode token per active request per step, completion,
and retraction on physical memory overflow.
"""

from __future__ import annotations

import json
import math
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

from .cache import RuntimeCache, _common_len
from .cost_model import GIGA, HardwareConfig, ModelConfig, kv_bytes, prefill_flops
from .prefix_tree import (
    DEFAULT_OUTPUT_LEN,
    DEFAULT_WASTE_THRESHOLD,
    Request,
    SortedTree,
    TreeNode,
    build,
    dfs_order,
    estimated_lengths,
    scanner_nodes,
)

LEFT, RIGHT = 0, 1
POLICIES = ("blend", "dfs", "fcfs", "random")


@dataclass
class SchedConfig:
    granularity: int = 128
    chunk_budget: int = 2048
    policy: str = "blend"
    waste_threshold: float = DEFAULT_WASTE_THRESHOLD
    sample_prob: float = 0.01
    seed: int = 0
    admission: str = "reserve"  # or "occupancy"
    budget_mode: str = "paced"  # or "fixed"
    default_output_len: float = DEFAULT_OUTPUT_LEN

    def __post_init__(self) -> None:
        if self.granularity < 1:
            raise ValueError("granularity must be at least 1")
        if self.chunk_budget < 1:
            raise ValueError("chunk_budget must be at least 1")
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}; expected one of {POLICIES}")
        if self.admission not in ("reserve", "occupancy"):
            raise ValueError(f"unknown admission mode {self.admission!r}")
        if self.budget_mode not in ("paced", "fixed"):
            raise ValueError(f"unknown budget_mode {self.budget_mode!r}")
        if self.waste_threshold < 0:
            raise ValueError("waste_threshold must be non-negative")
        if not 0 < self.sample_prob <= 1:
            raise ValueError("sample_prob must lie in (0, 1]")


@dataclass(frozen=True)
class MemoryPartition:
    m_left: float  # GB
    m_right: float  # GB
    total: float  # GB

    def side(self, s: int) -> float:
        return self.m_left if s == LEFT else self.m_right


def partition_memory(rho_L: float, rho_R: float, rho_root: float, M: float) -> MemoryPartition:
    """Split ``M`` so that ``M_L rho_L + M_R rho_R = M rho_root`` and ``M_L + M_R = M``.

    Clamped to ``[0, M]``; equal densities give an even split.
    """
    if M <= 0:
        raise ValueError("memory capacity must be positive")
    if rho_L == rho_R or math.isnan(rho_L - rho_R):
        m_left = M / 2
    elif math.isinf(rho_L) and not math.isinf(rho_root):
        m_left = 0.0
    elif math.isinf(rho_root):
        m_left = M
    else:
        m_left = M * (rho_root - rho_R) / (rho_L - rho_R)
    m_left = min(max(m_left, 0.0), M)
    return MemoryPartition(m_left, M - m_left, M)


# -- ordering -----------------------------------------------------------------

@dataclass(frozen=True)
class PacingPlan:
    """Projected totals the paced prefill budget spreads compute over.

    ``comp_flops`` is sharing-aware prefill plus decode work; ``mem_bytes``
    the decode KV traffic, both at estimated output lengths.
    """

    comp_flops: float
    mem_bytes: float

    @classmethod
    def from_tree(cls, tree: SortedTree, hc: HardwareConfig) -> "PacingPlan":
        root = tree.root
        return cls(float(root.dist_flops + root.dec_flops), root.mem_s * hc.bytes_per_second)

    @property
    def density(self) -> float:
        return self.comp_flops / self.mem_bytes if self.mem_bytes > 0 else math.inf


@dataclass(frozen=True)
class ScheduleEntry:
    rid: int
    side: int
    m_left: float
    m_right: float


@dataclass
class ScanState:
    """Cursor state of the dual scanner over the scanner-visible node sequence."""

    nodes: list[TreeNode]
    rho_root: float
    left: int = 0
    right: int = -1
    queues: list[deque] = field(default_factory=lambda: [deque(), deque()])
    shared: bool = False  # both cursors sit on the same node

    def __post_init__(self) -> None:
        if self.right < 0:
            self.right = len(self.nodes) - 1
        self._load(LEFT)
        self._load(RIGHT)

    def _load(self, side: int) -> None:
        """Fill an empty side queue from the next unvisited node."""
        if self.queues[side]:
            return
        if self.left > self.right:
            return
        if self.left == self.right:
            if not self.shared:
                # cursors meet: both sides drain what is left of the node, the left
                # from the front of its DFS order and the right from the back
                other = self.queues[1 - side]
                if not other:
                    rem = list(self.nodes[self.left].iter_requests())
                elif side == RIGHT:
                    rem = list(other)
                else:
                    rem = list(reversed(other))
                q = deque(rem)
                self.queues = [q, q]
                self.shared = True
            return
        if side == LEFT:
            self.queues[LEFT] = deque(self.nodes[self.left].iter_requests())
        else:
            self.queues[RIGHT] = deque(reversed(list(self.nodes[self.right].iter_requests())))

    @property
    def rho_L(self) -> float:
        return self.nodes[self.left].rho if self.left <= self.right else math.nan

    @property
    def rho_R(self) -> float:
        return self.nodes[self.right].rho if self.left <= self.right else math.nan

    def exhausted(self, side: int) -> bool:
        return not self.queues[side]

    def draw(self, side: int) -> Request:
        q = self.queues[side]
        req = q.popleft() if (side == LEFT or not self.shared) else q.pop()
        if not q:
            if self.shared:
                self.left, self.right = self.left + 1, self.right - 1
                self.queues = [deque(), deque()]
                self.shared = False
            elif side == LEFT:
                self.left += 1
            else:
                self.right -= 1
            self._load(LEFT)
            self._load(RIGHT)
        return req

    def partition(self, M: float) -> MemoryPartition:
        if self.left > self.right:
            return MemoryPartition(M, 0.0, M)
        if self.shared:
            # both cursors drain one node: it runs as plain DFS with full memory
            return MemoryPartition(M, 0.0, M)
        rho_L, rho_R = self.rho_L, self.rho_R
        if not rho_R < self.rho_root * (1 - 1e-9):
            return MemoryPartition(M, 0.0, M)  # right node is not memory-heavy
        if not rho_L > self.rho_root * (1 + 1e-9):
            return MemoryPartition(0.0, M, M)  # left node is not compute-heavy
        return partition_memory(rho_L, rho_R, self.rho_root, M)


def _draw_weight(req: Request, est: float, mc: ModelConfig) -> float:
    """Projected memory-time footprint of a request (KV bytes x decode steps)."""
    p = req.prompt_len
    return ((p + est / 2) * est + p) * mc.kv_bytes_per_token


def order_dual_scanner(tree: SortedTree, mc: ModelConfig, hc: HardwareConfig) -> list[ScheduleEntry]:
    """Interleave left and right cursor draws in proportion to the memory partition.

    Each side accumulates a virtual clock of projected footprint over its
    partition size; the side with the smaller clock draws next.
    """
    nodes = scanner_nodes(tree)
    if not nodes:
        return []
    M = hc.kv_memory_capacity
    est = estimated_lengths(tree.root)
    state = ScanState(nodes, tree.root.rho)
    clocks = [0.0, 0.0]
    out: list[ScheduleEntry] = []
    while not (state.exhausted(LEFT) and state.exhausted(RIGHT)):
        part = state.partition(M)
        sizes = (part.m_left, part.m_right)
        if state.shared or state.exhausted(RIGHT) or sizes[RIGHT] == 0:
            side = LEFT
        elif state.exhausted(LEFT) or sizes[LEFT] == 0:
            side = RIGHT
        else:
            side = LEFT if clocks[LEFT] <= clocks[RIGHT] else RIGHT
        if state.exhausted(side):
            side = 1 - side
        other = 1 - side
        if sizes[other] == 0:
            clocks[other] = max(clocks[other], clocks[side])
        req = state.draw(side)
        w = _draw_weight(req, est[req.id], mc)
        clocks[side] += w / max(sizes[side], 1e-12)
        out.append(ScheduleEntry(req.id, side, part.m_left, part.m_right))
    return out


def order_baseline(requests: Sequence[Request], policy: str, seed: int = 0,
                   hc: HardwareConfig | None = None) -> list[ScheduleEntry]:
    """FCFS (input order), DFS over the canonical trie, or a seeded shuffle."""
    if policy == "fcfs":
        order = list(requests)
    elif policy == "dfs":
        order = dfs_order(build(requests))
    elif policy == "random":
        order = list(requests)
        random.Random(seed).shuffle(order)
    else:
        raise ValueError(f"unknown baseline policy {policy!r}")
    M = hc.kv_memory_capacity if hc is not None else 0.0
    return [ScheduleEntry(r.id, LEFT, M, 0.0) for r in order]


# -- step formation -----------------------------------------------------------

@dataclass
class StepBatch:
    step: int
    prefill_chunks: list[tuple[int, int, int]]
    decode_ids: list[int]
    partition: MemoryPartition
    gemm_token_count: int
    active_kv_bytes: int
    retracted_ids: list[int] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "step": self.step,
            "prefill": [list(c) for c in self.prefill_chunks],
            "decode": self.decode_ids,
            "m_left": self.partition.m_left,
            "m_right": self.partition.m_right,
            "m_total": self.partition.total,
            "gemm": self.gemm_token_count,
            "kv": self.active_kv_bytes,
            "retracted": self.retracted_ids,
        }, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "StepBatch":
        d = json.loads(line)
        return cls(d["step"], [tuple(c) for c in d["prefill"]], d["decode"],
                   MemoryPartition(d["m_left"], d["m_right"], d["m_total"]),
                   d["gemm"], d["kv"], d.get("retracted", []))


def write_steps(path, steps: Iterable[StepBatch]) -> int:
    n = 0
    with open(path, "w") as fh:
        for sb in steps:
            fh.write(sb.to_json())
            fh.write("\n")
            n += 1
    return n


def read_steps(path) -> Iterator[StepBatch]:
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield StepBatch.from_json(line)
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}: line {lineno}: malformed step record ({exc})") from None


class _Req:
    """Per-request runtime state inside ``form_steps``."""

    __slots__ = ("r", "side", "gidx", "peak", "t0", "pos", "ctx", "dec_start",
                 "node", "recompute", "admit_seq", "state", "est")

    def __init__(self, r: Request, side: int, gidx: int, peak: int):
        self.r = r
        self.side = side
        self.gidx = gidx
        self.peak = peak
        self.t0 = 0  # tokens generated before the current admission
        self.pos = 0
        self.ctx = r.prompt_len
        self.dec_start = -1
        self.node = None
        self.recompute = False
        self.admit_seq = -1
        self.state = "queued"
        self.est = float(r.output_len)  # output length the pacing plan assumed


def _max_chunk(a: int, flops: float, mc: ModelConfig) -> int:
    """Largest ``n`` with ``prefill_flops(a, a + n) <= flops``."""
    if flops <= 0:
        return 0
    qa = 4 * mc.hidden_dim * mc.num_layers
    qb = 2 * mc.param_count + 2 * qa * a
    n = int((-qb + math.sqrt(qb * qb + 4 * qa * flops)) / (2 * qa))
    while n > 0 and prefill_flops(a, a + n, mc) > flops:
        n -= 1
    return n


def form_steps(
    order: Sequence[ScheduleEntry],
    requests: Sequence[Request],
    mc: ModelConfig,
    hc: HardwareConfig,
    cfg: SchedConfig | None = None,
    est_lens: dict[int, float] | None = None,
    plan: PacingPlan | None = None,
) -> Iterator[StepBatch]:
    """Continuous batching over ``order``; yields one ``StepBatch`` per engine step.

    ``est_lens`` gives the scheduler's projected output lengths (defaults to
    ``cfg.default_output_len``). With ``budget_mode="paced"`` and a ``plan``,
    each step's prefill budget targets the density of the work still
    remaining (planned compute left over planned KV traffic left), so compute
    is spread across the whole memory-bound horizon instead of running out
    early; otherwise the fixed ``chunk_budget`` applies.
    """
    cfg = cfg or SchedConfig()
    by_id = {r.id: r for r in requests}
    if len(by_id) != len(requests):
        raise ValueError("duplicate request ids")
    if sorted(e.rid for e in order) != sorted(by_id):
        raise ValueError("schedule order is not a permutation of the requests")
    kvb = mc.kv_bytes_per_token
    M_bytes = hc.kv_capacity_bytes
    M_tok = int(M_bytes // kvb)
    for r in requests:
        if kv_bytes(r.prompt_len, r.output_len, mc) > M_bytes:
            raise ValueError(
                f"request {r.id} needs {kv_bytes(r.prompt_len, r.output_len, mc) / GIGA:.3f} GB of KV "
                f"cache, more than the {hc.kv_memory_capacity} GB available")
    M = hc.kv_memory_capacity
    default_len = cfg.default_output_len

    states: dict[int, _Req] = {}
    queues: list[deque[_Req]] = [deque(), deque()]
    parts: list[tuple[float, float]] = []
    for gidx, e in enumerate(order):
        r = by_id[e.rid]
        est = est_lens.get(r.id, default_len) if est_lens else default_len
        if r.known_output:
            est = r.output_len
        peak = r.prompt_len + max(1, int(math.ceil(est)))
        st = _Req(r, e.side, gidx, peak)
        st.est = float(est)
        states[r.id] = st
        queues[e.side].append(st)
        parts.append((e.m_left, e.m_right))

    cache = RuntimeCache(capacity=M_tok)
    occ = [0, 0]  # charged KV tokens per side
    resv = [0, 0]  # projected peak tokens per side
    admitted: list[list[_Req]] = [[], []]  # admission stacks for retraction
    last_fresh: list[_Req | None] = [None, None]  # latest non-recompute admission per side
    prefilling: list[_Req] = []
    decoding: dict[int, _Req] = {}
    finish_at: dict[int, list[_Req]] = {}
    dec_sum = 0  # sum of (p + t) over decoding requests, before this step's token
    admit_seq = 0
    step = 0
    cum_demand = 0
    cum_gemm = 0
    g = cfg.granularity
    two_p = 2 * mc.param_count
    last_part = MemoryPartition(M, 0.0, M)
    n_live = len(states)
    paced = cfg.budget_mode == "paced" and plan is not None
    rem_comp = plan.comp_flops if paced else 0.0
    rem_mem = plan.mem_bytes if paced else 0.0

    def current_partition() -> MemoryPartition:
        heads = [q[0] for q in queues if q]
        if not heads:
            return last_part
        h = min(heads, key=lambda s: s.gidx)
        ml, mr = parts[h.gidx]
        if not queues[RIGHT]:
            ml, mr = M, 0.0
        elif not queues[LEFT]:
            ml, mr = 0.0, M
        return MemoryPartition(ml, mr, M)

    def release(st: _Req) -> None:
        t = generated(st)
        occ[st.side] -= st.r.prompt_len + t
        resv[st.side] -= st.peak
        if st.node is not None:
            cache.unlock(st.node)
            st.node = None

    def pick_victim(limits: list[float]) -> _Req:
        """Most recently admitted request on the side furthest over its partition."""
        for s in (0, 1):
            while admitted[s] and admitted[s][-1].state in ("done", "queued"):
                admitted[s].pop()
        sides = [s for s in (0, 1) if admitted[s]]
        if not sides:
            raise RuntimeError("memory overflow with no retractable request")
        s = max(sides, key=lambda s: (occ[s] - limits[s], -s))
        return admitted[s].pop()

    def observe_length(st: _Req) -> None:
        """Swap the plan's estimated length for the one observed at completion."""
        nonlocal rem_comp, rem_mem
        if not paced:
            return
        p, t, e = st.r.prompt_len, st.r.output_len, st.est
        rem_comp += two_p * (t - e)
        rem_mem += kvb * ((p * t + 0.5 * t * t) - (p * e + 0.5 * e * e))

    def generated(st: _Req) -> int:
        if st.state == "decoding":
            return step - st.dec_start
        return st.t0

    while n_live:
        part = current_partition()
        last_part = part
        limits = [part.m_left * GIGA / kvb, part.m_right * GIGA / kvb]
        retracted: list[int] = []
        n_dec = len(decoding)
        # this step's decode token is appended before the KV load
        need = occ[0] + occ[1] + n_dec
        while need > M_tok:
            victim = pick_victim(limits)
            t = generated(victim)
            if victim.state == "decoding":
                del decoding[victim.r.id]
                dec_sum -= victim.r.prompt_len + t
                finish_at[victim.dec_start + victim.r.output_len - 1].remove(victim)
                n_dec -= 1
            else:
                prefilling.remove(victim)
            release(victim)
            victim.t0 = t
            victim.state = "queued"
            victim.recompute = True
            victim.ctx = victim.r.prompt_len + t
            victim.pos = 0
            victim.peak = max(victim.peak, victim.ctx + 1)
            queues[victim.side].appendleft(victim)
            retracted.append(victim.r.id)
            need = occ[0] + occ[1] + n_dec
        decode_ids = list(decoding)
        # grow decoders by this step's token
        dec_by_side = [0, 0]
        if n_dec:
            for st in decoding.values():
                dec_by_side[st.side] += 1
        occ[0] += dec_by_side[0]
        occ[1] += dec_by_side[1]
        mem_bytes_step = (dec_sum + n_dec) * kvb
        dec_sum += n_dec

        # prefill budget
        tok_budget = cfg.chunk_budget
        if paced:
            rho = rem_comp / rem_mem if rem_mem > 0 else math.inf
            flop_budget = rho * mem_bytes_step - n_dec * two_p
        else:
            flop_budget = math.inf
        # every step runs at least one granularity of GEMM tokens
        min_tokens = max(0, g - n_dec)
        chunks: list[tuple[int, int, int]] = []
        tokens_used = 0
        flops_used = 0.0
        done_prefill: list[_Req] = []

        def schedule_chunk(st: _Req, admitting: bool = False) -> bool:
            """Add the next chunk of ``st``; returns False when the budget is spent.

            An admission always emits a chunk, possibly empty, so the stream
            records when the request's memory is charged.
            """
            nonlocal tokens_used, flops_used
            remaining = st.ctx - st.pos
            room = tok_budget - tokens_used
            if remaining == 0:
                chunks.append((st.r.id, st.pos, st.pos))
                done_prefill.append(st)
                return True
            n = min(remaining, max(room, 0))
            if math.isfinite(flop_budget):
                n_f = _max_chunk(st.pos, flop_budget - flops_used, mc)
                floor = max(0, min_tokens - tokens_used)
                n = min(n, max(n_f, floor))
            if n <= 0:
                if admitting:
                    chunks.append((st.r.id, st.pos, st.pos))
                return False
            a, b = st.pos, st.pos + n
            chunks.append((st.r.id, a, b))
            tokens_used += n
            flops_used += prefill_flops(a, b, mc)
            st.pos = b
            if not st.recompute:
                added, node = cache.insert(st.r.prompt[:b])
                cache.lock(node)
                if st.node is not None:
                    cache.unlock(st.node)
                st.node = node
            if st.pos == st.ctx:
                done_prefill.append(st)
            return True

        # continue in-flight prefills first
        for st in list(prefilling):
            if not schedule_chunk(st):
                break
        # admit new requests
        while True:
            if tokens_used >= tok_budget or (flops_used >= flop_budget and tokens_used >= min_tokens):
                break
            cands = []
            for s in (0, 1):
                if not queues[s]:
                    continue
                st = queues[s][0]
                prev = last_fresh[s]
                if (not st.recompute and prev is not None and prev.state == "prefilling"
                        and _common_len(prev.r.prompt, st.r.prompt, 0) > prev.pos):
                    continue  # its shared prefix is still being computed; wait for the hit
                charge = st.r.prompt_len + st.t0
                used = occ[0] + occ[1]
                if used + charge > M_tok:
                    continue
                side_busy = occ[s] > 0
                if cfg.admission == "reserve":
                    fits = resv[s] + st.peak <= limits[s]
                else:
                    fits = occ[s] + st.peak <= limits[s]
                if fits or not side_busy:
                    fill = occ[s] / limits[s] if limits[s] > 0 else math.inf
                    cands.append((fill, s, st, charge))
            if not cands:
                break
            cands.sort(key=lambda c: (c[0], c[1]))
            _, s, st, charge = cands[0]
            # admission
            if not st.recompute:
                hit, node = cache.match_prefix(st.r.prompt)
                cache.lock(node)
                st.node = node
                st.pos = hit
                last_fresh[s] = st
            queues[s].popleft()
            st.state = "prefilling"
            st.admit_seq = admit_seq
            admit_seq += 1
            occ[s] += charge
            resv[s] += st.peak
            admitted[s].append(st)
            prefilling.append(st)
            if not schedule_chunk(st, admitting=True):
                break
        for st in done_prefill:
            prefilling.remove(st)

        active_kv = (occ[0] + occ[1]) * kvb
        cache.set_capacity(max(0, M_tok - occ[0] - occ[1]))

        # completions after this step's decode token
        for st in finish_at.pop(step, ()):
            del decoding[st.r.id]
            dec_sum -= st.r.prompt_len + st.r.output_len
            st.state = "done"
            observe_length(st)
            release_done = st.r.prompt_len + st.r.output_len
            occ[st.side] -= release_done
            resv[st.side] -= st.peak
            if st.node is not None:
                cache.unlock(st.node)
                st.node = None
            n_live -= 1
        # prefill completions start decoding next step
        for st in done_prefill:
            left = st.r.output_len - st.t0
            if left <= 0:
                st.state = "done"
                observe_length(st)
                occ[st.side] -= st.r.prompt_len + st.t0
                resv[st.side] -= st.peak
                if st.node is not None:
                    cache.unlock(st.node)
                    st.node = None
                n_live -= 1
                continue
            st.state = "decoding"
            st.dec_start = step + 1 - st.t0
            decoding[st.r.id] = st
            dec_sum += st.r.prompt_len + st.t0
            finish_at.setdefault(st.dec_start + st.r.output_len - 1, []).append(st)
        cache.set_capacity(max(0, M_tok - occ[0] - occ[1]))

        demand = tokens_used + n_dec
        cum_demand += demand
        if n_live == 0:
            target = -(-cum_demand // g) * g
        else:
            target = int(math.floor(cum_demand / g + 0.5)) * g
        gemm = max(0, target - cum_gemm)
        cum_gemm += gemm
        if paced:
            rem_comp -= flops_used + n_dec * two_p
            rem_mem -= mem_bytes_step
        yield StepBatch(step, chunks, decode_ids, part, gemm, active_kv, retracted)
        step += 1
        if step > 50_000_000:
            raise RuntimeError("step limit exceeded; scheduler made no progress")


def build_schedule(
    requests: Sequence[Request],
    mc: ModelConfig,
    hc: HardwareConfig,
    cfg: SchedConfig,
    tree: SortedTree | None = None,
) -> tuple[list[ScheduleEntry], dict[int, float], PacingPlan]:
    """Order requests per ``cfg.policy``; returns (order, estimated lengths, pacing plan).

    Every policy sees the same length estimates and pacing plan, so policies
    differ only in their request order.
    """
    from .prefix_tree import prepare_tree

    if tree is None:
        tree = prepare_tree(requests, mc, hc, cfg.sample_prob, cfg.seed, cfg.waste_threshold,
                            cfg.default_output_len)
    est = estimated_lengths(tree.root)
    if cfg.policy == "blend":
        order = order_dual_scanner(tree, mc, hc)
    else:
        order = order_baseline(requests, cfg.policy, cfg.seed, hc)
    return order, est, PacingPlan.from_tree(tree, hc)
