"""On-disk KV cache with group-granularity layout and a calibrated disk model.

File format (version 1, all integers little-endian):

    offset  size  field
    0       4     magic "KVSW"
    4       4     u32 version
    8       4     u32 num_layers
    12      4     u32 h_kv
    16      4     u32 head_dim
    20      4     u32 group_size
    24      4     u32 elem_bytes (2 = IEEE half, 4 = float32)
    28      4     u32 block_align
    32      8     u64 max_groups_per_layer
    40      8*L   u64 groups_written, one per layer

The header block is padded with zeros to ``block_align``. Layer ``l``'s
region starts at ``header_pad + l * max_groups * slot_stride`` where
``slot_stride`` is ``group_byte_size`` rounded up to ``block_align``;
every group therefore sits at an aligned offset and layers occupy
disjoint contiguous regions.

A group payload packs ``group_size`` tokens as [token][kv_head][K|V][dim]
scalars, row-major, little-endian.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import GroupNotFoundError, ParameterError, StorageError

MAGIC = b"KVSW"
VERSION = 1
_HEADER_FIXED = struct.Struct("<4sIIIIIIIQ")


class GroupId(NamedTuple):
    layer: int
    index: int


@dataclass(frozen=True)
class DiskLayout:
    """Geometry of the on-disk cache."""

    num_layers: int
    h_kv: int
    head_dim: int
    group_size: int
    elem_bytes: int = 2
    block_align: int = 4096

    def __post_init__(self):
        if self.elem_bytes not in (2, 4):
            raise ParameterError(f"elem_bytes must be 2 or 4, got {self.elem_bytes}")
        for name in ("num_layers", "h_kv", "head_dim", "group_size", "block_align"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be positive")

    @property
    def token_entry_bytes(self) -> int:
        """Bytes of one token's K and V across all KV heads."""
        return self.h_kv * 2 * self.head_dim * self.elem_bytes

    @property
    def group_byte_size(self) -> int:
        return self.group_size * self.token_entry_bytes

    @property
    def slot_stride(self) -> int:
        """Physical bytes per group slot, padded to block alignment."""
        align = self.block_align
        return (self.group_byte_size + align - 1) // align * align

    @property
    def _dtype(self) -> np.dtype:
        return np.dtype("<f2" if self.elem_bytes == 2 else "<f4")

    def encode_group(self, k: np.ndarray, v: np.ndarray) -> bytes:
        """Serialize one group's K and V tensors (group_size, h_kv, head_dim)."""
        shape = (self.group_size, self.h_kv, self.head_dim)
        k = np.asarray(k, dtype=np.float64).reshape(shape)
        v = np.asarray(v, dtype=np.float64).reshape(shape)
        packed = np.stack([k, v], axis=2)  # [token][head][K|V][dim]
        return packed.astype(self._dtype).tobytes()

    def decode_group(self, raw: bytes) -> tuple[np.ndarray, np.ndarray]:
        """Inverse of encode_group; returns float64 (k, v) arrays."""
        if len(raw) != self.group_byte_size:
            raise ParameterError(
                f"payload is {len(raw)} bytes, expected {self.group_byte_size}"
            )
        packed = np.frombuffer(raw, dtype=self._dtype)
        packed = packed.reshape(self.group_size, self.h_kv, 2, self.head_dim)
        packed = packed.astype(np.float64)
        return packed[:, :, 0, :].copy(), packed[:, :, 1, :].copy()


class GroupPayload:
    """One group's raw on-disk bytes with lazy decoding."""

    __slots__ = ("gid", "raw", "_arrays")

    def __init__(self, gid: GroupId, raw: bytes):
        self.gid = gid
        self.raw = raw
        self._arrays = None

    def arrays(self, layout: DiskLayout) -> tuple[np.ndarray, np.ndarray]:
        if self._arrays is None:
            self._arrays = layout.decode_group(self.raw)
        return self._arrays


@dataclass
class IoStats:
    """Requests issued and logical payload bytes moved by one read call."""

    requests: int = 0
    bytes: int = 0
    request_blocks: list[int] = field(default_factory=list)


def _plan_requests(ids: Sequence[GroupId]) -> list[tuple[int, int, int]]:
    """Coalesce sorted, deduplicated ids into (layer, start, count) runs."""
    runs: list[tuple[int, int, int]] = []
    for gid in ids:
        if runs:
            layer, start, count = runs[-1]
            if gid.layer == layer and gid.index == start + count:
                runs[-1] = (layer, start, count + 1)
                continue
        runs.append((gid.layer, gid.index, 1))
    return runs


def _check_ids(ids: Sequence[GroupId]) -> None:
    for prev, cur in zip(ids, ids[1:]):
        if cur <= prev:
            raise ParameterError("group ids must be sorted and deduplicated")


class GroupStore:
    """Shared layout math and read planning for both backends."""

    def __init__(self, layout: DiskLayout, max_tokens: int):
        self.layout = layout
        self.max_groups = -(-max_tokens // layout.group_size)
        self._written = [0] * layout.num_layers

    def groups_written(self, layer: int) -> int:
        return self._written[layer]

    def _check_layer(self, layer: int) -> None:
        if not 0 <= layer < self.layout.num_layers:
            raise ParameterError(f"layer {layer} out of range")

    def prefill_write(self, layer: int, k: np.ndarray, v: np.ndarray) -> tuple[int, int]:
        """Persist all full groups of a token run; the trailing partial group
        is not written and its size is reported back for the caller's
        rolling buffer. Returns (groups_written, remainder_tokens)."""
        self._check_layer(layer)
        g = self.layout.group_size
        k = np.asarray(k, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        if k.shape != v.shape or k.ndim != 3 or k.shape[1:] != (
            self.layout.h_kv,
            self.layout.head_dim,
        ):
            raise ParameterError(f"bad prefill tensor shape {k.shape}")
        tokens = k.shape[0]
        full = tokens // g
        base = self._written[layer]
        for j in range(full):
            self.write_group(layer, base + j, k[j * g : (j + 1) * g], v[j * g : (j + 1) * g])
        return full, tokens - full * g

    def write_group(self, layer: int, index: int, k: np.ndarray, v: np.ndarray) -> None:
        self._check_layer(layer)
        if index >= self.max_groups:
            raise ParameterError(f"group index {index} beyond capacity {self.max_groups}")
        raw = self.layout.encode_group(k, v)
        self._put(layer, index, raw)
        self._written[layer] = max(self._written[layer], index + 1)

    def read_groups(self, ids: Sequence[GroupId]) -> tuple[list[GroupPayload], IoStats]:
        """Read payloads in id order, coalescing runs of consecutive indices
        within a layer into single requests. ``request_blocks`` carries the
        physical (alignment-padded) size of each request for timing."""
        ids = [GroupId(*g) for g in ids]
        _check_ids(ids)
        for gid in ids:
            self._check_layer(gid.layer)
            if gid.index >= self._written[gid.layer]:
                raise GroupNotFoundError(gid)
        stats = IoStats()
        payloads: list[GroupPayload] = []
        for layer, start, count in _plan_requests(ids):
            raws = self._get_run(layer, start, count)
            for j, raw in enumerate(raws):
                payloads.append(GroupPayload(GroupId(layer, start + j), raw))
            stats.requests += 1
            stats.bytes += count * self.layout.group_byte_size
            stats.request_blocks.append(count * self.layout.slot_stride)
        return payloads, stats

    # backend hooks
    def _put(self, layer: int, index: int, raw: bytes) -> None:
        raise NotImplementedError

    def _get_run(self, layer: int, start: int, count: int) -> list[bytes]:
        raise NotImplementedError

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class MemoryStore(GroupStore):
    """In-memory byte store used by the simulated backend.

    Stores the exact bytes the file backend would, so quantization through
    ``elem_bytes`` is identical across backends.
    """

    def __init__(self, layout: DiskLayout, max_tokens: int):
        super().__init__(layout, max_tokens)
        self._groups: dict[tuple[int, int], bytes] = {}

    def _put(self, layer, index, raw):
        self._groups[(layer, index)] = raw

    def _get_run(self, layer, start, count):
        return [self._groups[(layer, start + j)] for j in range(count)]


class FileStore(GroupStore):
    """Single-file backend with aligned per-layer regions."""

    def __init__(self, path, layout: DiskLayout, max_tokens: int, _existing=False):
        super().__init__(layout, max_tokens)
        self.path = str(path)
        align = layout.block_align
        header_bytes = _HEADER_FIXED.size + 8 * layout.num_layers
        self._data_start = (header_bytes + align - 1) // align * align
        self._region = self.max_groups * layout.slot_stride
        try:
            if _existing:
                self._f = open(self.path, "r+b")
            else:
                self._f = open(self.path, "w+b")
                self._f.truncate(self._data_start + self._region * layout.num_layers)
                self._write_header()
        except OSError as exc:
            raise StorageError(f"cannot open {self.path}: {exc}") from exc

    @classmethod
    def create(cls, path, layout: DiskLayout, max_tokens: int) -> "FileStore":
        return cls(path, layout, max_tokens)

    @classmethod
    def open_existing(cls, path) -> "FileStore":
        try:
            with open(path, "rb") as f:
                fixed = f.read(_HEADER_FIXED.size)
                magic, version, nl, hkv, hd, g, eb, align, maxg = _HEADER_FIXED.unpack(fixed)
                if magic != MAGIC:
                    raise StorageError(f"{path}: bad magic {magic!r}")
                if version != VERSION:
                    raise StorageError(f"{path}: unsupported version {version}")
                counts = struct.unpack(f"<{nl}Q", f.read(8 * nl))
        except OSError as exc:
            raise StorageError(f"cannot read {path}: {exc}") from exc
        layout = DiskLayout(nl, hkv, hd, g, eb, align)
        store = cls(path, layout, maxg * g, _existing=True)
        store.max_groups = maxg
        store._written = list(counts)
        store._region = maxg * layout.slot_stride
        return store

    def _write_header(self) -> None:
        lay = self.layout
        fixed = _HEADER_FIXED.pack(
            MAGIC, VERSION, lay.num_layers, lay.h_kv, lay.head_dim,
            lay.group_size, lay.elem_bytes, lay.block_align, self.max_groups,
        )
        self._f.seek(0)
        self._f.write(fixed)
        self._f.write(struct.pack(f"<{lay.num_layers}Q", *self._written))

    def _offset(self, layer: int, index: int) -> int:
        return self._data_start + layer * self._region + index * self.layout.slot_stride

    def _put(self, layer, index, raw):
        stride = self.layout.slot_stride
        buf = raw + b"\x00" * (stride - len(raw))
        try:
            self._f.seek(self._offset(layer, index))
            self._f.write(buf)
        except OSError as exc:
            raise StorageError(f"write failed at ({layer},{index}): {exc}") from exc

    def _get_run(self, layer, start, count):
        stride = self.layout.slot_stride
        size = self.layout.group_byte_size
        try:
            self._f.seek(self._offset(layer, start))
            blob = self._f.read(count * stride)
        except OSError as exc:
            raise StorageError(f"read failed at ({layer},{start}): {exc}") from exc
        return [blob[j * stride : j * stride + size] for j in range(count)]

    def close(self) -> None:
        if self._f is not None and not self._f.closed:
            self._write_header()
            self._f.close()


@dataclass(frozen=True)
class DiskModel:
    """Block-size-dependent effective bandwidth model.

    ``curve`` maps block sizes (bytes) to the achieved fraction of peak
    bandwidth at that request size; it must be non-decreasing. Requests pay
    ``per_request_latency`` on top of the transfer time. Queries between
    calibration points interpolate linearly in log2(block_bytes); queries
    outside the calibrated range clamp to the end fractions.
    """

    name: str
    peak_bandwidth: float
    per_request_latency: float
    curve: tuple[tuple[int, float], ...]

    def __post_init__(self):
        if not self.curve:
            raise ParameterError("bandwidth curve needs at least one point")
        blocks = [b for b, _ in self.curve]
        fracs = [f for _, f in self.curve]
        if sorted(blocks) != blocks or len(set(blocks)) != len(blocks):
            raise ParameterError("curve block sizes must be strictly increasing")
        if any(f2 < f1 for f1, f2 in zip(fracs, fracs[1:])):
            raise ParameterError("bandwidth curve must be non-decreasing")
        if any(not 0.0 <= f <= 1.0 for f in fracs):
            raise ParameterError("curve fractions must lie in [0, 1]")

    def fraction_at(self, block_bytes: int) -> float:
        if block_bytes <= 0:
            raise ParameterError("block size must be positive")
        pts = self.curve
        if block_bytes <= pts[0][0]:
            return pts[0][1]
        if block_bytes >= pts[-1][0]:
            return pts[-1][1]
        x = np.log2(block_bytes)
        xs = np.log2([b for b, _ in pts])
        ys = [f for _, f in pts]
        return float(np.interp(x, xs, ys))


def effective_bandwidth(model: DiskModel, block_bytes: int) -> float:
    """Achieved bytes/sec for requests of the given size."""
    return model.peak_bandwidth * model.fraction_at(block_bytes)


def estimate_io_time(model: DiskModel, request_blocks: Sequence[int]) -> float:
    """Modeled seconds to serve the given requests back to back."""
    total = 0.0
    for block in request_blocks:
        if block <= 0:
            raise ParameterError("block size must be positive")
        total += model.per_request_latency + block / effective_bandwidth(model, block)
    return total
