"""Resource-aware prefix tree over request prompts.

Pipeline: :func:`build` a radix trie, :func:`sample_output_lengths`, then
:func:`annotate_density`, :func:`sort_layerwise`, :func:`split_outliers` and
:func:`merge_subtrees`.  Annotation ops mutate nodes in place; the structural
ops return a fresh tree and leave their input untouched.

Sharing is accounted structurally: every node's segment is prefilled once, so
the distinct prefill FLOPs of a tree are the sum of node segment costs plus
the distinct unshared tails held by merged group nodes.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

from .cache import RuntimeCache, _common_len
from .cost_model import (
    AggregateCost,
    HardwareConfig,
    ModelConfig,
    aggregate_density,
    comp_flops,
    decode_flops,
    mem_time,
    prefill_flops,
)

DEFAULT_OUTPUT_LEN = 256
DEFAULT_WASTE_THRESHOLD = 256


@dataclass(eq=False)
class Request:
    id: int
    prompt: tuple
    output_len: int
    known_output: bool = False
    modality: str = "text"

    def __post_init__(self) -> None:
        if not isinstance(self.prompt, tuple):
            self.prompt = tuple(self.prompt)
        if self.id < 0:
            raise ValueError(f"request id {self.id} must be non-negative")
        if len(self.prompt) < 1:
            raise ValueError(f"request {self.id}: prompt must hold at least one token")
        if self.output_len < 0:
            raise ValueError(f"request {self.id}: negative output length")

    @property
    def prompt_len(self) -> int:
        return len(self.prompt)

    def __repr__(self) -> str:
        return f"Request(id={self.id}, p={self.prompt_len}, d={self.output_len}, {self.modality})"


@dataclass(eq=False)
class TreeNode:
    segment: tuple = ()
    offset: int = 0
    children: list["TreeNode"] = field(default_factory=list)
    requests: list[Request] = field(default_factory=list)
    depth: int = 0
    merged: bool = False
    relocated: bool = False
    parent: "TreeNode | None" = field(default=None, repr=False)
    # annotations
    est_lens: list[float] = field(default_factory=list, repr=False)
    est_output_len: float = math.nan
    agg: AggregateCost | None = None
    rho: float = math.nan
    min_id: int = -1
    # integer / raw aggregates backing ``agg``
    own_flops: int = 0
    dist_flops: int = 0
    full_flops: int = 0
    dec_flops: float = 0.0
    mem_s: float = 0.0

    @property
    def end(self) -> int:
        return self.offset + len(self.segment)

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def iter_nodes(self) -> Iterator["TreeNode"]:
        """Pre-order traversal in child order."""
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))

    def iter_requests(self) -> Iterator[Request]:
        """Requests of the subtree in left-to-right DFS order."""
        for node in self.iter_nodes():
            yield from node.requests

    def postorder(self) -> list["TreeNode"]:
        return list(self.iter_nodes())[::-1]

    def request_count(self) -> int:
        return sum(len(n.requests) for n in self.iter_nodes())


@dataclass
class SortedTree:
    root: TreeNode
    optimal_sharing: float
    sharing: float
    leaf_order: list[int]
    waste_flops: int = 0
    relocations: int = 0


# -- build ------------------------------------------------------------------

def build(requests: Iterable[Request]) -> TreeNode:
    """Radix-compressed trie over prompts; independent of insertion order."""
    reqs = sorted(requests, key=lambda r: r.id)
    for a, b in zip(reqs, reqs[1:]):
        if a.id == b.id:
            raise ValueError(f"duplicate request id {a.id}")
    root = TreeNode()
    index: dict[int, dict] = {id(root): {}}
    for r in reqs:
        prompt = r.prompt
        node, pos = root, 0
        while True:
            if pos == len(prompt):
                node.requests.append(r)
                break
            kids = index[id(node)]
            child = kids.get(prompt[pos])
            if child is None:
                leaf = TreeNode(prompt[pos:], pos, requests=[r])
                kids[prompt[pos]] = leaf
                index[id(leaf)] = {}
                break
            k = _common_len(child.segment, prompt, pos)
            if k < len(child.segment):
                top = TreeNode(child.segment[:k], child.offset)
                child.segment = child.segment[k:]
                child.offset += k
                index[id(top)] = {child.segment[0]: child}
                kids[prompt[pos]] = top
                child = top
            node, pos = child, pos + k
    for node in list(_walk_index(root, index)):
        kids = index[id(node)]
        node.children = [kids[t] for t in sorted(kids)]
        if node.requests and node.children:
            # a prompt ends inside a shared path: hold it in an empty-segment leaf
            holder = TreeNode((), node.end, requests=node.requests)
            node.requests = []
            node.children.insert(0, holder)
            index[id(holder)] = {}
    _refresh_links(root)
    return root


def _walk_index(root: TreeNode, index: dict) -> Iterator[TreeNode]:
    stack = [root]
    while stack:
        node = stack.pop()
        yield node
        stack.extend(index[id(node)].values())


def _refresh_links(root: TreeNode) -> None:
    """Recompute parent pointers, depths, request order and subtree min ids."""
    root.parent = None
    root.depth = 0
    for node in root.iter_nodes():
        for c in node.children:
            c.parent = node
            c.depth = node.depth + 1
    for node in root.postorder():
        if node.requests and not node.merged:
            order = sorted(range(len(node.requests)), key=lambda i: node.requests[i].id)
            node.requests = [node.requests[i] for i in order]
            if len(node.est_lens) == len(order):
                node.est_lens = [node.est_lens[i] for i in order]
        ids = [r.id for r in node.requests] + [c.min_id for c in node.children]
        node.min_id = min(ids) if ids else -1


def clone_tree(root: TreeNode) -> TreeNode:
    """Copy the node structure; requests are shared."""
    mapping: dict[int, TreeNode] = {}
    for node in root.iter_nodes():
        new = TreeNode(
            node.segment, node.offset, [], list(node.requests), node.depth, node.merged,
            node.relocated, None, list(node.est_lens), node.est_output_len, node.agg,
            node.rho, node.min_id, node.own_flops, node.dist_flops, node.full_flops,
            node.dec_flops, node.mem_s,
        )
        mapping[id(node)] = new
        if node.parent is not None and id(node.parent) in mapping:
            parent = mapping[id(node.parent)]
            new.parent = parent
    for node in root.iter_nodes():
        mapping[id(node)].children = [mapping[id(c)] for c in node.children]
    return mapping[id(root)]


# -- structural cost accounting --------------------------------------------

def _tail_flops(node: TreeNode, mc: ModelConfig) -> int:
    """Distinct prefill FLOPs of request tails beyond the node segment."""
    base = node.end
    prompts = sorted(r.prompt for r in node.requests if r.prompt_len > base)
    total = 0
    prev: tuple | None = None
    for p in prompts:
        lcp = base
        if prev is not None:
            lcp = base + _common_len(prev[base:], p, base)
        total += prefill_flops(lcp, len(p), mc)
        prev = p
    return total


def distinct_prefill_flops(root: TreeNode, mc: ModelConfig) -> int:
    """Prefill FLOPs of the tree when every node segment is computed once."""
    return sum(prefill_flops(n.offset, n.end, mc) + _tail_flops(n, mc) for n in root.iter_nodes())


def total_comp_flops(requests: Iterable[Request], mc: ModelConfig) -> int:
    """``T_comp`` in FLOPs with true output lengths and no sharing."""
    return sum(comp_flops(r.prompt_len, r.output_len, mc) for r in requests)


def tree_sharing(root: TreeNode, mc: ModelConfig) -> float:
    """Fraction of ``T_comp`` saved when each tree node is prefilled exactly once."""
    reqs = list(root.iter_requests())
    total = total_comp_flops(reqs, mc)
    if total == 0:
        return 0.0
    full = sum(prefill_flops(0, r.prompt_len, mc) for r in reqs)
    return (full - distinct_prefill_flops(root, mc)) / total


# -- output length estimation ----------------------------------------------

def sample_output_lengths(
    root: TreeNode,
    sample_prob: float,
    seed: int = 0,
    default_len: float = DEFAULT_OUTPUT_LEN,
) -> TreeNode:
    """Estimate output lengths by Bernoulli sampling over the tree.

    Known-output requests always reveal their length.  An unsampled request
    takes the mean of revealed lengths in the nearest enclosing subtree that
    has any, falling back to ``default_len``.
    """
    if not 0.0 < sample_prob <= 1.0:
        raise ValueError(f"sample_prob must lie in (0, 1], got {sample_prob}")
    rng = random.Random(seed)
    revealed: dict[int, bool] = {}
    for r in root.iter_requests():
        if r.known_output:
            revealed[r.id] = True
        else:
            revealed[r.id] = sample_prob >= 1.0 or rng.random() < sample_prob
    rsum: dict[int, float] = {}
    rcount: dict[int, int] = {}
    for node in root.postorder():
        s = float(sum(r.output_len for r in node.requests if revealed[r.id]))
        c = sum(1 for r in node.requests if revealed[r.id])
        for ch in node.children:
            s += rsum[id(ch)]
            c += rcount[id(ch)]
        rsum[id(node)], rcount[id(node)] = s, c
    source: dict[int, float] = {}
    for node in root.iter_nodes():
        if rcount[id(node)]:
            source[id(node)] = rsum[id(node)] / rcount[id(node)]
        elif node.parent is not None:
            source[id(node)] = source[id(node.parent)]
        else:
            source[id(node)] = float(default_len)
        fallback = source[id(node)]
        node.est_lens = [float(r.output_len) if revealed[r.id] else fallback for r in node.requests]
    _aggregate_estimates(root)
    return root


def _aggregate_estimates(root: TreeNode) -> None:
    sums: dict[int, tuple[float, int]] = {}
    for node in root.postorder():
        s, c = float(sum(node.est_lens)), len(node.est_lens)
        for ch in node.children:
            cs, cc = sums[id(ch)]
            s, c = s + cs, c + cc
        sums[id(node)] = (s, c)
        node.est_output_len = s / c if c else math.nan


def estimated_lengths(root: TreeNode) -> dict[int, float]:
    out = {}
    for node in root.iter_nodes():
        for r, e in zip(node.requests, node.est_lens):
            out[r.id] = e
    return out


def set_true_lengths(root: TreeNode) -> TreeNode:
    """Use true output lengths as estimates (oracle knowledge)."""
    for node in root.iter_nodes():
        node.est_lens = [float(r.output_len) for r in node.requests]
    _aggregate_estimates(root)
    return root


# -- density ----------------------------------------------------------------

def annotate_density(root: TreeNode, mc: ModelConfig, hc: HardwareConfig) -> TreeNode:
    """Attach sharing-aware ``agg`` and ``rho`` to every node.

    A subtree's compute counts its ancestor path, its segments and its
    distinct tails once each, plus decode GEMMs at estimated lengths.
    """
    for node in root.iter_nodes():
        if len(node.est_lens) != len(node.requests):
            raise ValueError("output lengths must be estimated before annotating density")
    peak = hc.flops_per_second
    for node in root.postorder():
        own = prefill_flops(node.offset, node.end, mc) + _tail_flops(node, mc)
        dist, full, dec, mem = own, 0, 0.0, 0.0
        for r, e in zip(node.requests, node.est_lens):
            full += prefill_flops(0, r.prompt_len, mc)
            dec += decode_flops(1, mc) * e
            mem += mem_time(r.prompt_len, e, mc, hc)
        for ch in node.children:
            dist += ch.dist_flops
            full += ch.full_flops
            dec += ch.dec_flops
            mem += ch.mem_s
        node.own_flops, node.dist_flops, node.full_flops = own, dist, full
        node.dec_flops, node.mem_s = dec, mem
        eff = prefill_flops(0, node.offset, mc) + dist + dec
        t_comp = full + dec
        s = 0.0 if t_comp == 0 else min(1.0, max(0.0, 1.0 - eff / t_comp))
        node.agg = AggregateCost(t_comp / peak, mem, s)
        node.rho = aggregate_density(node.agg)
    return root


def _sort_key(node: TreeNode) -> tuple[float, int]:
    return (-node.rho, node.min_id)


def _finalize(root: TreeNode, mc: ModelConfig, optimal: float | None = None,
              waste: int = 0, relocations: int = 0) -> SortedTree:
    sharing = tree_sharing(root, mc)
    return SortedTree(
        root=root,
        optimal_sharing=sharing if optimal is None else optimal,
        sharing=sharing,
        leaf_order=[r.id for r in root.iter_requests()],
        waste_flops=waste,
        relocations=relocations,
    )


def sort_layerwise(root: TreeNode, mc: ModelConfig) -> SortedTree:
    """Order every children list by density, descending; ties by smallest request id."""
    root = clone_tree(root)
    for node in root.iter_nodes():
        if node.children:
            if any(math.isnan(c.rho) for c in node.children):
                raise ValueError("densities must be annotated before sorting")
            node.children.sort(key=_sort_key)
    return _finalize(root, mc)


# -- conditional splitting --------------------------------------------------

def _side(rho: float, rho_root: float) -> int:
    if rho > rho_root:
        return 1
    if rho < rho_root:
        return -1
    return 0


def find_outliers(tree: SortedTree, hc: HardwareConfig) -> list[tuple[TreeNode, list[TreeNode]]]:
    """Children whose density falls on the other side of the root density.

    A child is an outlier when it sits on the opposite side of ``rho(root)``
    from both its parent and the combined density of its siblings.
    """
    rho_root = tree.root.rho
    peak = hc.flops_per_second
    found = []
    for parent in tree.root.iter_nodes():
        if parent is tree.root or len(parent.children) < 2:
            continue
        eff = [c.dist_flops + c.dec_flops for c in parent.children]
        mem = [c.mem_s for c in parent.children]
        tot_mem = sum(mem)
        parent_side = _side(parent.rho, rho_root)
        flagged = []
        for i, c in enumerate(parent.children):
            side = _side(c.rho, rho_root)
            if side == 0 or side == parent_side:
                continue
            rest_mem = tot_mem - mem[i]
            rest_eff = parent.agg.t_comp * (1.0 - parent.agg.sharing_ratio) * peak - eff[i]
            rest = math.inf if rest_mem <= 0 else rest_eff / peak / rest_mem
            if side != _side(rest, rho_root):
                flagged.append(c)
        if flagged and len(flagged) < len(parent.children):
            found.append((parent, flagged))
    return found


def split_outliers(
    tree: SortedTree,
    mc: ModelConfig,
    hc: HardwareConfig,
    waste_threshold: float = DEFAULT_WASTE_THRESHOLD,
) -> SortedTree:
    """Relocate density outliers to the root when the recomputed prefix is short.

    All flagged children of one parent move together into a single new root
    child that duplicates the parent's path, so the waste per relocation is
    the parent path's prefill cost.
    """
    if waste_threshold < 0:
        raise ValueError("waste_threshold must be non-negative")
    root = clone_tree(tree.root)
    work = SortedTree(root, tree.optimal_sharing, tree.sharing, tree.leaf_order)
    moves = [(p, f) for p, f in find_outliers(work, hc) if p.end <= waste_threshold]
    moves.sort(key=lambda m: -m[0].depth)
    waste = 0
    for parent, flagged in moves:
        path = next(parent.iter_requests()).prompt[: parent.end]
        parent.children = [c for c in parent.children if c not in flagged]
        if len(flagged) == 1:
            c = flagged[0]
            new = TreeNode(path + c.segment, 0, c.children, c.requests, merged=c.merged,
                           est_lens=c.est_lens)
        else:
            new = TreeNode(path, 0, flagged)
        new.relocated = True
        root.children.append(new)
        waste += prefill_flops(0, parent.end, mc)
        if len(parent.children) == 1:
            _fold(parent)
    _refresh_links(root)
    _aggregate_estimates(root)
    annotate_density(root, mc, hc)
    for node in root.iter_nodes():
        node.children.sort(key=_sort_key)
    return _finalize(root, mc, tree.optimal_sharing, tree.waste_flops + waste,
                     tree.relocations + len(moves))


def _fold(node: TreeNode) -> None:
    """Absorb a node's only child into it."""
    (child,) = node.children
    node.segment = node.segment + child.segment
    node.children = child.children
    node.requests = child.requests
    node.est_lens = child.est_lens
    node.merged = child.merged
    node.relocated = node.relocated or child.relocated


# -- merging ----------------------------------------------------------------

def merge_subtrees(tree: SortedTree, mc: ModelConfig) -> SortedTree:
    """Collapse nodes whose children are single-request leaves into group nodes.

    The group keeps its requests in the former DFS order.  Sibling segments
    start with distinct tokens, so the tails share nothing and the sharing
    ratio is unchanged.
    """
    root = clone_tree(tree.root)
    for node in root.postorder():
        if node is root or len(node.children) < 2:
            continue
        if all(c.is_leaf and not c.merged and len(c.requests) == 1 for c in node.children):
            node.requests = [c.requests[0] for c in node.children]
            node.est_lens = [c.est_lens[0] for c in node.children] if all(
                c.est_lens for c in node.children) else []
            node.children = []
            node.merged = True
            node.own_flops = node.dist_flops
    _refresh_links(root)
    return _finalize(root, mc, tree.optimal_sharing, tree.waste_flops, tree.relocations)


# -- traversal --------------------------------------------------------------

def dfs_order(tree: SortedTree | TreeNode) -> list[Request]:
    root = tree.root if isinstance(tree, SortedTree) else tree
    return list(root.iter_requests())


def scanner_nodes(tree: SortedTree) -> list[TreeNode]:
    """Units visited by the dual scanner: the root's children."""
    root = tree.root
    if not root.children:
        return [root] if root.requests else []
    return list(root.children)


def sharing_ratio(
    order: Sequence[Request],
    mc: ModelConfig,
    capacity_tokens: int | None = None,
    requests: Iterable[Request] | None = None,
) -> float:
    """Fraction of ``T_comp`` saved by a prefix cache processing ``order`` sequentially.

    ``capacity_tokens=None`` is the unlimited-cache bound.
    """
    ids = [r.id for r in order]
    if len(set(ids)) != len(ids):
        raise ValueError("order contains duplicate requests")
    if requests is not None and {r.id for r in requests} != set(ids):
        raise ValueError("order is not a permutation of the request set")
    total = total_comp_flops(order, mc)
    if total == 0:
        return 0.0
    cache = RuntimeCache(capacity_tokens)
    saved = 0
    for r in order:
        hit, _ = cache.lookup_and_insert(r.prompt)
        saved += prefill_flops(0, hit, mc)
    return saved / total


# -- pipeline ---------------------------------------------------------------

def prepare_tree(
    requests: Sequence[Request],
    mc: ModelConfig,
    hc: HardwareConfig,
    sample_prob: float = 0.01,
    seed: int = 0,
    waste_threshold: float = DEFAULT_WASTE_THRESHOLD,
    default_len: float = DEFAULT_OUTPUT_LEN,
) -> SortedTree:
    """build -> sample -> annotate -> sort -> split -> merge."""
    root = build(requests)
    sample_output_lengths(root, sample_prob, seed, default_len)
    annotate_density(root, mc, hc)
    tree = sort_layerwise(root, mc)
    tree = split_outliers(tree, mc, hc, waste_threshold)
    return merge_subtrees(tree, mc)


# -- dump / load ------------------------------------------------------------

def dump_tree(tree: SortedTree | TreeNode) -> str:
    """Indented text dump, one node per line."""
    root = tree.root if isinstance(tree, SortedTree) else tree
    lines = []
    for node in root.iter_nodes():
        ids = ",".join(str(r.id) for r in node.requests)
        head = ",".join(str(t) for t in node.segment[:8])
        flags = ("M" if node.merged else "") + ("R" if node.relocated else "")
        lines.append(
            f"{'  ' * node.depth}depth={node.depth} seg_len={len(node.segment)} "
            f"tokens=[{head}] rho={node.rho:.6g} est={node.est_output_len:.6g} "
            f"flags={flags or '-'} ids=[{ids}]"
        )
    return "\n".join(lines) + "\n"


def load_tree_dump(text: str) -> dict:
    """Parse :func:`dump_tree` output into nested dicts keyed like the dump fields."""
    stack: list[dict] = []
    root = None
    for line in text.splitlines():
        if not line.strip():
            continue
        fields_ = dict(part.split("=", 1) for part in line.split())
        rec = {
            "depth": int(fields_["depth"]),
            "seg_len": int(fields_["seg_len"]),
            "tokens": [int(t) for t in fields_["tokens"][1:-1].split(",") if t],
            "rho": float(fields_["rho"]),
            "est": float(fields_["est"]),
            "flags": "" if fields_["flags"] == "-" else fields_["flags"],
            "ids": [int(t) for t in fields_["ids"][1:-1].split(",") if t],
            "children": [],
        }
        while stack and stack[-1]["depth"] >= rec["depth"]:
            stack.pop()
        if stack:
            stack[-1]["children"].append(rec)
        else:
            root = rec
        stack.append(rec)
    if root is None:
        raise ValueError("empty tree dump")
    return root
