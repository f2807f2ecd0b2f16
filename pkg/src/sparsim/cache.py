"""DRAM-cache bookkeeping for streamed weight units.

Weights are managed as units: input bundles (one up+gate column pair),
intermediate bundles (down column, possibly fused with up/gate rows depending
on scheme), and columns of matrices a scheme keeps dense.  Each (layer, unit
group) pair owns one cache.  Per token, the active units are offered to the
cache in descending selection-score order; residents count as hits, the rest
as misses.  Misses are admitted while capacity remains, evicting only among
residents that are not active this token; when nothing is evictable the miss
is bypassed (streamed without caching).

Eviction policies: LFU (per-session frequency, ties by recency then lowest
unit id), LRU, Belady's oracle (farthest next use from a precomputed table,
never-used-again first), and NoCache (every access misses).
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Set

import numpy as np

__all__ = [
    "Group",
    "UnitId",
    "AccessStats",
    "CacheState",
    "NextUseTable",
    "belady_precompute",
    "EvictionPolicy",
    "belady_evict",
    "cache_update",
    "resident_bitvector",
]


class Group(IntEnum):
    """Unit groups; the int values also order unit ids for tie-breaking."""

    INPUT_BUNDLE = 0
    INTERMEDIATE_BUNDLE = 1
    DENSE_CHUNK = 2


class UnitId(NamedTuple):
    layer: int
    group: Group
    index: int


@dataclass
class AccessStats:
    """Hit/miss counters; bypassed is the subset of misses never admitted."""

    hits: int = 0
    misses: int = 0
    bypassed: int = 0

    @property
    def accesses(self) -> int:
        return self.hits + self.misses

    @property
    def hit_rate(self) -> float:
        return self.hits / self.accesses if self.accesses else 0.0

    def __add__(self, other: "AccessStats") -> "AccessStats":
        return AccessStats(self.hits + other.hits, self.misses + other.misses,
                           self.bypassed + other.bypassed)


@dataclass
class CacheState:
    """Mutable cache of at most capacity_units units.

    freq and last_use are defined exactly for resident units; eviction drops
    both, so LFU counts are per residency span.  clock advances once per
    cache_update call (one token).
    """

    capacity_units: int
    layer: Optional[int] = None
    resident: Set[UnitId] = field(default_factory=set)
    freq: Dict[UnitId, int] = field(default_factory=dict)
    last_use: Dict[UnitId, int] = field(default_factory=dict)
    clock: int = 0

    def __post_init__(self):
        if self.capacity_units < 0:
            raise ValueError("capacity must be >= 0")


class NextUseTable:
    """Next-occurrence lookups for Belady eviction, built in one pass over a
    trace of per-token active-unit sets."""

    def __init__(self, occurrences: Dict[UnitId, List[int]], length: int):
        self._occ = occurrences
        self.length = length

    @classmethod
    def from_trace(cls, trace: Sequence[Iterable[UnitId]]) -> "NextUseTable":
        occ: Dict[UnitId, List[int]] = {}
        for pos, units in enumerate(trace):
            for u in units:
                occ.setdefault(u, []).append(pos)
        return cls(occ, len(trace))

    def next_after(self, unit: UnitId, position: int) -> float:
        """Index of the first occurrence strictly after position, or inf."""
        positions = self._occ.get(unit)
        if not positions:
            return math.inf
        i = bisect.bisect_right(positions, position)
        return positions[i] if i < len(positions) else math.inf


def belady_precompute(trace: Sequence[Iterable[UnitId]]) -> NextUseTable:
    """Next-use table for a full access trace (one active set per token)."""
    return NextUseTable.from_trace(trace)


@dataclass(frozen=True)
class EvictionPolicy:
    kind: str
    next_use: Optional[NextUseTable] = None

    _KINDS = ("lfu", "lru", "belady", "nocache")

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise ValueError(f"unknown policy {self.kind!r}")
        if self.kind == "belady" and self.next_use is None:
            raise ValueError("belady policy needs a next-use table")

    @classmethod
    def lfu(cls) -> "EvictionPolicy":
        return cls("lfu")

    @classmethod
    def lru(cls) -> "EvictionPolicy":
        return cls("lru")

    @classmethod
    def belady(cls, table: NextUseTable) -> "EvictionPolicy":
        return cls("belady", next_use=table)

    @classmethod
    def nocache(cls) -> "EvictionPolicy":
        return cls("nocache")


def belady_evict(state: CacheState, table: NextUseTable, position: int,
                 active: Iterable[UnitId] = ()) -> UnitId:
    """Resident unit outside the active set with the farthest next use.

    Units never used again (next use inf) are chosen first; ties resolve to
    the lowest unit id.
    """
    active = set(active)
    best = None
    best_next = -1.0
    for u in sorted(state.resident):
        if u in active:
            continue
        nu = table.next_after(u, position)
        if nu > best_next:
            best, best_next = u, nu
    if best is None:
        raise ValueError("no evictable unit: all residents are active")
    return best


def _pick_victim(state: CacheState, policy: EvictionPolicy,
                 candidates: Set[UnitId], position: Optional[int]) -> UnitId:
    if policy.kind == "lfu":
        return min(candidates, key=lambda u: (state.freq[u], state.last_use[u], u))
    if policy.kind == "lru":
        return min(candidates, key=lambda u: (state.last_use[u], u))
    if policy.kind == "belady":
        if position is None:
            raise ValueError("belady eviction needs the current trace position")
        # candidates == resident minus active, so the active filter is a no-op here
        best = None
        best_next = -1.0
        for u in sorted(candidates):
            nu = policy.next_use.next_after(u, position)
            if nu > best_next:
                best, best_next = u, nu
        return best
    raise ValueError(f"policy {policy.kind!r} does not evict")


def cache_update(state: CacheState, active_units: Sequence[UnitId],
                 policy: EvictionPolicy, position: Optional[int] = None) -> AccessStats:
    """Process one token's active units (ordered by descending admission
    priority) against the cache.  Mutates state in place and returns the
    hit/miss/bypass counts for this token.

    position is the token's index in the precomputed trace; required for the
    Belady policy, ignored otherwise.
    """
    state.clock += 1
    stats = AccessStats()
    active_set = set(active_units)
    if len(active_set) != len(active_units):
        raise ValueError("active units must be distinct")
    if state.layer is not None:
        for u in active_set:
            if u.layer != state.layer:
                raise ValueError(f"unit {u} does not belong to layer {state.layer}")
    for u in active_units:
        if u in state.resident:
            stats.hits += 1
            state.freq[u] += 1
            state.last_use[u] = state.clock
            continue
        stats.misses += 1
        if policy.kind == "nocache":
            stats.bypassed += 1
            continue
        if len(state.resident) >= state.capacity_units:
            candidates = state.resident - active_set
            if not candidates:
                stats.bypassed += 1
                continue
            victim = _pick_victim(state, policy, candidates, position)
            state.resident.remove(victim)
            del state.freq[victim]
            del state.last_use[victim]
        state.resident.add(u)
        state.freq[u] = 1
        state.last_use[u] = state.clock
    return stats


def resident_bitvector(state: CacheState, group: Group, size: int) -> np.ndarray:
    """0/1 residency vector over a unit group, indexed by unit index."""
    out = np.zeros(size, dtype=np.int8)
    for u in state.resident:
        if u.group == group:
            if u.index >= size:
                raise ValueError(f"resident unit index {u.index} outside group size {size}")
            out[u.index] = 1
    return out
