"""Runtime prefix cache: a radix trie of computed prompt tokens with LRU eviction.

Nodes referenced by in-flight requests are locked and never evicted.  The
token budget applies to unlocked (evictable) tokens only; locked tokens are
already charged to the requests holding them.
"""

from __future__ import annotations

import heapq
import itertools
from typing import Sequence


class CacheNode:
    __slots__ = ("key", "children", "parent", "lock_ref", "last_access", "uid")

    def __init__(self, key: tuple = (), parent: "CacheNode | None" = None, uid: int = 0):
        self.key = key
        self.children: dict[int, CacheNode] = {}
        self.parent = parent
        self.lock_ref = 0
        self.last_access = 0
        self.uid = uid

    def __repr__(self) -> str:
        return f"CacheNode(len={len(self.key)}, lock={self.lock_ref}, children={len(self.children)})"


def _common_len(a: Sequence[int], b: Sequence[int], start: int) -> int:
    """Length of the common prefix of ``a`` and ``b[start:]``."""
    n = min(len(a), len(b) - start)
    if tuple(b[start:start + n]) == a[:n]:
        return n
    i = 0
    while i < n and a[i] == b[start + i]:
        i += 1
    return i


class RuntimeCache:
    """Radix-trie prefix cache.

    ``capacity`` bounds the evictable token count; ``None`` means unlimited.
    """

    def __init__(self, capacity: int | None = None):
        self.capacity = capacity
        self._uids = itertools.count(1)
        self.root = CacheNode()
        self.root.lock_ref = 1  # never evicted
        self.total_tokens = 0
        self.evictable_tokens = 0
        self._clock = 0
        self._heap: list[tuple[int, int, CacheNode]] = []

    # -- lookup / insert ----------------------------------------------------

    def _tick(self) -> int:
        self._clock += 1
        return self._clock

    def _split(self, node: CacheNode, at: int) -> CacheNode:
        """Split ``node`` so that its first ``at`` tokens become a new parent."""
        top = CacheNode(node.key[:at], node.parent, next(self._uids))
        top.lock_ref = node.lock_ref
        top.last_access = node.last_access
        node.parent.children[node.key[0]] = top
        node.key = node.key[at:]
        node.parent = top
        top.children[node.key[0]] = node
        return top

    def match_prefix(self, tokens: Sequence[int]) -> tuple[int, CacheNode]:
        """Longest cached prefix of ``tokens``; returns ``(length, node)``.

        The returned node ends exactly at the matched length (a partially
        matched node is split).
        """
        now = self._tick()
        node = self.root
        pos = 0
        n = len(tokens)
        while pos < n:
            child = node.children.get(tokens[pos])
            if child is None:
                break
            k = _common_len(child.key, tokens, pos)
            child.last_access = now
            if k < len(child.key):
                child = self._split(child, k)
                pos += k
                node = child
                break
            pos += k
            node = child
        return pos, node

    def insert(self, tokens: Sequence[int]) -> tuple[int, CacheNode]:
        """Insert ``tokens``; returns ``(new_tokens, end_node)``."""
        hit, node = self.match_prefix(tokens)
        if hit == len(tokens):
            return 0, node
        new = CacheNode(tuple(tokens[hit:]), node, next(self._uids))
        new.last_access = self._clock
        node.children[new.key[0]] = new
        added = len(new.key)
        self.total_tokens += added
        self.evictable_tokens += added
        self._push(new)
        self._enforce()
        return added, new

    def lookup_and_insert(self, tokens: Sequence[int]) -> tuple[int, int]:
        """Return ``(hit_length, miss_length)`` and cache the full sequence."""
        hit, _ = self.match_prefix(tokens)
        self.insert(tokens)
        return hit, len(tokens) - hit

    # -- locking ------------------------------------------------------------

    def lock(self, node: CacheNode) -> None:
        while node is not None and node is not self.root:
            if node.lock_ref == 0:
                self.evictable_tokens -= len(node.key)
            node.lock_ref += 1
            node = node.parent

    def unlock(self, node: CacheNode) -> None:
        while node is not None and node is not self.root:
            if node.lock_ref <= 0:
                raise RuntimeError("cache unlock without matching lock")
            node.lock_ref -= 1
            if node.lock_ref == 0:
                self.evictable_tokens += len(node.key)
                if not node.children:
                    self._push(node)
            node = node.parent
        self._enforce()

    # -- eviction -----------------------------------------------------------

    def _push(self, node: CacheNode) -> None:
        heapq.heappush(self._heap, (node.last_access, node.uid, node))

    def set_capacity(self, capacity: int | None) -> None:
        self.capacity = capacity
        self._enforce()

    def _enforce(self) -> None:
        if self.capacity is not None and self.evictable_tokens > self.capacity:
            self.evict(self.evictable_tokens - self.capacity)

    def evict(self, num_tokens: int) -> int:
        """Evict at least ``num_tokens`` unlocked tokens, least recently used first."""
        freed = 0
        heap = self._heap
        while freed < num_tokens and heap:
            stamp, _, node = heapq.heappop(heap)
            if node.parent is None or node.lock_ref or node.children:
                continue  # stale entry
            if stamp != node.last_access:
                self._push(node)
                continue
            parent = node.parent
            del parent.children[node.key[0]]
            node.parent = None
            freed += len(node.key)
            self.total_tokens -= len(node.key)
            self.evictable_tokens -= len(node.key)
            if parent is not self.root and not parent.children and not parent.lock_ref:
                self._push(parent)
        if len(heap) > 4 * max(1024, self.total_tokens // 8):
            self._rebuild_heap()
        return freed

    def _rebuild_heap(self) -> None:
        self._heap = []
        stack = [self.root]
        while stack:
            node = stack.pop()
            if node.children:
                stack.extend(node.children.values())
            elif node is not self.root and not node.lock_ref:
                self._push(node)

    def cached_prefix(self, tokens: Sequence[int]) -> int:
        """Matched length without side effects on recency or structure."""
        node = self.root
        pos = 0
        while pos < len(tokens):
            child = node.children.get(tokens[pos])
            if child is None:
                break
            k = _common_len(child.key, tokens, pos)
            pos += k
            if k < len(child.key):
                break
            node = child
        return pos
