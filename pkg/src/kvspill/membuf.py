"""In-memory buffers and the logical KV address map.

The reuse buffer is a fixed set of slots, one group payload each, replaced
FIFO. It is shared by all layers: the per-layer preload working set and
the cross-step cache are the same storage. The rolling buffer stages
freshly generated per-token entries until a full group exists. The mapping
table stitches reuse slots, freshly loaded payloads, and rolling tokens
into one position-ordered logical view without copying any payload.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractViolation, ParameterError
from .kvstore import GroupId, GroupPayload


@dataclass
class LookupResult:
    hits: dict[GroupId, int]
    misses: list[GroupId]
    reserved: dict[GroupId, int]


class ReuseBuffer:
    """FIFO slot cache of recently loaded KV groups."""

    def __init__(self, capacity_slots: int):
        if capacity_slots < 0:
            raise ParameterError("capacity must be >= 0")
        self.capacity_slots = capacity_slots
        self._payloads: list[GroupPayload | None] = [None] * capacity_slots
        self._slot_gid: list[GroupId | None] = [None] * capacity_slots
        self._slot_table: dict[GroupId, int] = {}
        self._fifo: deque[int] = deque()
        self._free: list[int] = list(range(capacity_slots - 1, -1, -1))
        self._reserved: dict[int, GroupId] = {}

    def __len__(self):
        return len(self._slot_table)

    def contains(self, gid: GroupId) -> bool:
        return gid in self._slot_table

    def payload(self, slot: int) -> GroupPayload:
        p = self._payloads[slot]
        if p is None:
            raise ContractViolation(f"slot {slot} holds no payload")
        return p

    def lookup_and_reserve(self, ids) -> LookupResult:
        """Split a step's selection into hits and misses, reserving one slot
        per miss. Eviction takes the FIFO-oldest occupant that is neither a
        hit of this call nor a slot already reserved for it."""
        ids = [GroupId(*g) for g in ids]
        if len(set(ids)) != len(ids):
            raise ParameterError("ids must be deduplicated")
        hits = {gid: self._slot_table[gid] for gid in ids if gid in self._slot_table}
        misses = [gid for gid in ids if gid not in hits]
        if len(hits) + len(misses) > self.capacity_slots:
            raise ConfigurationError(
                f"selection of {len(ids)} groups does not fit in "
                f"{self.capacity_slots} reuse slots"
            )
        pinned = set(hits.values())
        reserved: dict[GroupId, int] = {}
        for gid in misses:
            slot = self._take_slot(pinned)
            reserved[gid] = slot
            self._reserved[slot] = gid
            pinned.add(slot)
        return LookupResult(hits=hits, misses=misses, reserved=reserved)

    def _take_slot(self, pinned: set[int]) -> int:
        if self._free:
            return self._free.pop()
        for slot in self._fifo:  # oldest first
            if slot not in pinned:
                self._evict(slot)
                return slot
        raise ConfigurationError("no evictable slot available")

    def _evict(self, slot: int) -> None:
        gid = self._slot_gid[slot]
        del self._slot_table[gid]
        self._fifo.remove(slot)
        self._slot_gid[slot] = None
        self._payloads[slot] = None

    def insert_loaded(self, gid: GroupId, slot: int, payload: GroupPayload) -> None:
        gid = GroupId(*gid)
        if self._reserved.get(slot) != gid:
            raise ContractViolation(f"slot {slot} was not reserved for {gid}")
        del self._reserved[slot]
        self._payloads[slot] = payload
        self._slot_gid[slot] = gid
        self._slot_table[gid] = slot
        self._fifo.append(slot)

    def audit(self) -> None:
        """Raise if slot_table, fifo_order, and slot contents disagree."""
        occupied = set(self._slot_table.values())
        if len(occupied) != len(self._slot_table):
            raise ContractViolation("slot_table is not injective")
        if len(self._slot_table) > self.capacity_slots:
            raise ContractViolation("slot_table exceeds capacity")
        if sorted(self._fifo) != sorted(occupied):
            raise ContractViolation("fifo_order does not match occupied slots")
        if len(set(self._fifo)) != len(self._fifo):
            raise ContractViolation("fifo_order has duplicates")
        for slot in range(self.capacity_slots):
            gid = self._slot_gid[slot]
            if slot in occupied:
                if gid is None or self._slot_table.get(gid) != slot:
                    raise ContractViolation(f"slot {slot} gid mapping broken")
                if self._payloads[slot] is None and slot not in self._reserved:
                    raise ContractViolation(f"occupied slot {slot} has no payload")
            elif slot not in self._reserved and gid is not None:
                raise ContractViolation(f"free slot {slot} still tagged {gid}")


class RollingBuffer:
    """Per-layer staging of fresh per-token KV entries until a group fills."""

    def __init__(self, num_layers: int, group_size: int):
        self.group_size = group_size
        self._k: list[list[np.ndarray]] = [[] for _ in range(num_layers)]
        self._v: list[list[np.ndarray]] = [[] for _ in range(num_layers)]

    def length(self, layer: int) -> int:
        return len(self._k[layer])

    def entries(self, layer: int) -> tuple[np.ndarray, np.ndarray]:
        """Current staged tokens as (m, h_kv, d) arrays; m may be 0."""
        k, v = self._k[layer], self._v[layer]
        if not k:
            return np.empty((0, 0, 0)), np.empty((0, 0, 0))
        return np.stack(k), np.stack(v)

    def seed(self, layer: int, k_tokens, v_tokens) -> None:
        """Adopt a prefill remainder (fewer than group_size tokens)."""
        k_tokens = np.asarray(k_tokens, dtype=np.float64)
        v_tokens = np.asarray(v_tokens, dtype=np.float64)
        if k_tokens.shape[0] >= self.group_size:
            raise ParameterError("remainder must be smaller than a group")
        self._k[layer] = [k_tokens[i] for i in range(k_tokens.shape[0])]
        self._v[layer] = [v_tokens[i] for i in range(v_tokens.shape[0])]

    def append(self, layer: int, k_entry, v_entry):
        """Stage one token. Returns the completed (k, v) group arrays and
        clears the layer when the staged run reaches the group size, else
        None; the caller is responsible for flushing the returned group."""
        self._k[layer].append(np.asarray(k_entry, dtype=np.float64))
        self._v[layer].append(np.asarray(v_entry, dtype=np.float64))
        if len(self._k[layer]) == self.group_size:
            k = np.stack(self._k[layer])
            v = np.stack(self._v[layer])
            self._k[layer].clear()
            self._v[layer].clear()
            return k, v
        return None


@dataclass
class MappingSegment:
    source: str  # "reuse" | "staging" | "rolling"
    gid: GroupId | None
    k: np.ndarray  # (tokens, h_kv, d), a view into the owning buffer
    v: np.ndarray


@dataclass
class MappingTable:
    """Position-ordered logical KV view over heterogeneous storage."""

    segments: list[MappingSegment] = field(default_factory=list)

    def n_tokens(self) -> int:
        return sum(seg.k.shape[0] for seg in self.segments)

    def materialize(self) -> tuple[np.ndarray, np.ndarray]:
        """Concatenate the logical view (this is where copying happens)."""
        if not self.segments:
            return np.empty((0, 0, 0)), np.empty((0, 0, 0))
        k = np.concatenate([seg.k for seg in self.segments], axis=0)
        v = np.concatenate([seg.v for seg in self.segments], axis=0)
        return k, v


def build_mapping(selected, hits, loaded, rolling_k, rolling_v, layout) -> MappingTable:
    """Assemble the logical view for one attention call.

    ``selected`` is the step's chosen group ids; ``hits`` and ``loaded``
    map ids to GroupPayload and must cover the selection exactly once.
    Group segments come first in ascending token position, then the
    rolling tokens. Payload arrays are referenced, never copied.
    """
    selected = [GroupId(*g) for g in selected]
    covered = set(hits) | set(loaded)
    if set(hits) & set(loaded):
        raise ContractViolation("a group appears as both hit and freshly loaded")
    if covered != set(selected) or len(hits) + len(loaded) != len(selected):
        raise ContractViolation("hits and loads do not cover the selection exactly")
    segments = []
    for gid in sorted(selected):
        if gid in hits:
            payload, source = hits[gid], "reuse"
        else:
            payload, source = loaded[gid], "staging"
        k, v = payload.arrays(layout)
        segments.append(MappingSegment(source=source, gid=gid, k=k, v=v))
    rolling_k = np.asarray(rolling_k)
    if rolling_k.size:
        segments.append(
            MappingSegment(source="rolling", gid=None, k=rolling_k, v=np.asarray(rolling_v))
        )
    return MappingTable(segments=segments)
