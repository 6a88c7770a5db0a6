"""Decode orchestration: prediction, prefetch, buffers, flushes, timing.

Execution is single-threaded and deterministic; concurrency lives in a
discrete-event timeline with exactly two logical workers. The prefetch
worker handles prediction, reuse-buffer resolution, disk reads for the
next layer, and background group flushes; the compute worker runs the
current layer's attention and MLP. The prefetch of unit k may not start
before the compute of unit k-1 starts (its prediction input is that
unit's layer input), and compute k may not start before its fetch
finishes. Overlap therefore changes timing only; the value computation is
identical in overlapped and serialized modes, which is asserted by tests.

With a simulated backend, I/O time comes from the disk model and compute
time from a deterministic flop-cost model, so runs are reproducible.
With the file backend, reads hit the filesystem and are timed for real,
and the timeline runs serialized.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .compress import CompressedKCache, ProjectionMatrix, rank_for_sigma
from .errors import ConfigurationError, ParameterError
from .kvstore import DiskLayout, DiskModel, FileStore, GroupId, MemoryStore, estimate_io_time
from .membuf import ReuseBuffer, RollingBuffer, build_mapping
from .predictor import approx_scores, low_rank_queries, select_groups
from .toymodel import ToyModel, exact_attention


@dataclass
class RuntimeConfig:
    """Tunable decode parameters (G, sigma, M, C plus execution switches)."""

    group_size: int = 8
    sigma: float = 8.0
    m_groups: int = 50
    reuse_capacity_bytes: int = 1 << 20
    mg_const: int = 400
    elem_bytes: int = 2
    block_align: int = 4096
    rolling_enabled: bool = True
    reuse_enabled: bool = True
    pipeline: bool = True
    scheduling_eps: float = 0.05

    def __post_init__(self):
        if self.group_size < 1 or self.sigma < 1 or self.m_groups < 1:
            raise ParameterError("group_size, sigma, and m_groups must be >= 1")


@dataclass
class StepStats:
    """Per-step accounting. ``io_seconds`` covers reads plus incremental
    flush writes; ``flush_seconds`` is the flush component alone."""

    step: int
    io_seconds: float = 0.0
    compute_seconds: float = 0.0
    flush_seconds: float = 0.0
    wall_seconds: float = 0.0
    reuse_hits: int = 0
    reuse_requests: int = 0
    bytes_read: int = 0
    groups_flushed: int = 0

    def to_record(self) -> dict:
        return dict(self.__dict__)


@dataclass
class DecodeStats:
    peak_bandwidth: float | None
    steps: list[StepStats] = field(default_factory=list)

    def totals(self, name: str) -> float:
        return sum(getattr(s, name) for s in self.steps)

    @property
    def reuse_rate(self) -> float:
        req = self.totals("reuse_requests")
        return self.totals("reuse_hits") / req if req else 0.0

    @property
    def tokens_per_sec(self) -> float:
        wall = self.totals("wall_seconds")
        return len(self.steps) / wall if wall > 0 else math.inf

    @property
    def io_utilization(self) -> float:
        io = self.totals("io_seconds")
        if io <= 0 or not self.peak_bandwidth:
            return 0.0
        return min(1.0, self.totals("bytes_read") / io / self.peak_bandwidth)

    def write_jsonl(self, path) -> None:
        with open(path, "w") as f:
            for s in self.steps:
                f.write(json.dumps(s.to_record()) + "\n")


@dataclass
class ComputeCostModel:
    """Deterministic per-operation timing for simulated execution.

    Costs are flop counts over the actual operand shapes divided by an
    assumed sustained rate, plus small fixed overheads. Nothing here aims
    for absolute accuracy; the point is a reproducible, monotone stand-in
    for wall-clock measurements.
    """

    gflops: float = 4.0
    per_layer_overhead: float = 2e-5
    per_request_cpu: float = 2e-6
    per_slot_cpu: float = 5e-9

    def _sec(self, flops: float) -> float:
        return flops / (self.gflops * 1e9)

    def layer_compute_seconds(self, dims, n_attend: int) -> float:
        d, dm, hq, hkv = dims.head_dim, dims.model_dim, dims.h_q, dims.h_kv
        proj = 2 * dm * d * (hq + 2 * hkv) + 2 * (hq * d) * dm
        attn = 4 * hq * d * max(n_attend, 1)
        mlp = 4 * dm * dm
        return self._sec(proj + attn + mlp) + self.per_layer_overhead

    def predict_seconds(self, dims, n_tokens: int, r: int, m: int) -> float:
        d, dm, hq = dims.head_dim, dims.model_dim, dims.h_q
        q_lr = hq * (2 * dm * d + 2 * d * r)
        scores = 2 * hq * r * max(n_tokens, 1)
        reduce_topk = 3 * max(n_tokens, 1) + m
        return self._sec(q_lr + scores + reduce_topk)

    def buffer_seconds(self, capacity_slots: int, n_requests: int) -> float:
        return self.per_request_cpu * n_requests + self.per_slot_cpu * capacity_slots


class _Timeline:
    """Two-worker schedule; worker clocks persist across steps, so the
    fetch for the next step's first layer hides under the current step's
    last compute."""

    def __init__(self, pipelined: bool):
        self.pipelined = pipelined
        self.now_serial = 0.0
        self.prefetch_free = 0.0
        self.prev_compute_start = 0.0
        self.prev_compute_end = 0.0

    def unit(self, fetch_sec: float, compute_sec: float) -> float:
        """Advance by one (step, layer) unit; returns its compute-end time.
        ``fetch_sec`` is all prefetch-worker work for the unit: pending
        flush writes, prediction, buffer management, and the reads."""
        if not self.pipelined:
            self.now_serial += fetch_sec + compute_sec
            return self.now_serial
        fetch_start = max(self.prefetch_free, self.prev_compute_start)
        fetch_end = fetch_start + fetch_sec
        self.prefetch_free = fetch_end
        compute_start = max(self.prev_compute_end, fetch_end)
        compute_end = compute_start + compute_sec
        self.prev_compute_start = compute_start
        self.prev_compute_end = compute_end
        return compute_end


class Engine:
    """Decode engine over a disk-resident KV cache.

    Construct with :func:`build_engine`, call :meth:`prefill` once with the
    prompt's per-layer KV, then :meth:`decode_step` per generated token (or
    :meth:`decode_sequence` for a whole teacher-forced run).
    """

    def __init__(self, model: ToyModel, config: RuntimeConfig,
                 projections: dict[int, ProjectionMatrix], store,
                 disk_model: DiskModel | None = None,
                 cost_model: ComputeCostModel | None = None):
        dims = model.dims
        expected_r = rank_for_sigma(dims.joint_dim, config.sigma)
        if len(projections) != dims.layers:
            raise ParameterError("need one projection per layer")
        for layer, proj in projections.items():
            if proj.r != expected_r or proj.joint_dim != dims.joint_dim:
                raise ParameterError(f"projection for layer {layer} does not match sigma")
        self.model = model
        self.config = config
        self.projections = projections
        self.store = store
        self.layout: DiskLayout = store.layout
        self.disk_model = disk_model
        self.cost_model = cost_model or ComputeCostModel()
        self.simulated = disk_model is not None
        slots = config.reuse_capacity_bytes // self.layout.group_byte_size
        self.reuse_enabled = config.reuse_enabled and slots > 0
        self.reuse = ReuseBuffer(slots if self.reuse_enabled else 0)
        self.rolling = RollingBuffer(dims.layers, config.group_size)
        # the no-rolling ablation parks fresh tokens here, invisible to attention
        self._holding_k: list[list[np.ndarray]] = [[] for _ in range(dims.layers)]
        self._holding_v: list[list[np.ndarray]] = [[] for _ in range(dims.layers)]
        # groups completed this step; written during the layer's next fetch
        self._pending_flush: list[list[tuple[int, np.ndarray, np.ndarray]]] = [
            [] for _ in range(dims.layers)
        ]
        self._logical_groups = [0] * dims.layers
        self.k_lr = CompressedKCache(dims.layers, expected_r)
        self.stats = DecodeStats(
            peak_bandwidth=disk_model.peak_bandwidth if disk_model else None)
        self.selection_log: list[list[list[int]]] = []  # [step][layer] -> ids
        self.recall_log: list[list[float]] = []  # populated under oracle recall
        self._oracle_recall = False
        self._full_k: list[list[np.ndarray]] = [[] for _ in range(dims.layers)]
        self._timeline = _Timeline(config.pipeline and self.simulated)
        self._last_completion = 0.0
        self._step_index = 0
        self._prefilled = False

    # -- setup ---------------------------------------------------------

    def enable_oracle_recall(self) -> None:
        """Track, per step and layer, the recall of the predicted selection
        against the exact-score oracle on the uncompressed flushed keys.
        Must be enabled before prefill so the pristine keys are retained."""
        if self._prefilled:
            raise ConfigurationError("enable oracle recall before prefill")
        self._oracle_recall = True

    def recall_log_flat(self) -> list[float]:
        return [r for per_step in self.recall_log for r in per_step]

    def prefill(self, prompt_kv: list[tuple[np.ndarray, np.ndarray]]) -> None:
        """Write the prompt KV to storage layer by layer and build the
        compressed key cache for every flushed token; the trailing partial
        group seeds each rolling buffer."""
        dims = self.model.dims
        if len(prompt_kv) != dims.layers:
            raise ParameterError("prompt KV must cover every layer")
        g = self.config.group_size
        for layer, (k, v) in enumerate(prompt_kv):
            k = np.asarray(k, dtype=np.float64)
            v = np.asarray(v, dtype=np.float64)
            full, rem = self.store.prefill_write(layer, k, v)
            self._logical_groups[layer] = full
            flushed = k[: full * g]
            self.k_lr.append(layer, flushed.reshape(full * g, -1), self.projections[layer])
            if self._oracle_recall and full:
                self._full_k[layer].append(flushed.reshape(full * g, -1).copy())
            if rem:
                if self.config.rolling_enabled:
                    self.rolling.seed(layer, k[full * g :], v[full * g :])
                else:
                    self._holding_k[layer] = [k[full * g + i] for i in range(rem)]
                    self._holding_v[layer] = [v[full * g + i] for i in range(rem)]
        self._prefilled = True

    # -- decode --------------------------------------------------------

    def decode_step(self, x_t: np.ndarray) -> tuple[np.ndarray, StepStats]:
        if not self._prefilled:
            raise ConfigurationError("prefill must run before decoding")
        dims = self.model.dims
        step = StepStats(step=self._step_index)
        self.selection_log.append([])
        if self._oracle_recall:
            self.recall_log.append([])
        x_t = np.asarray(x_t, dtype=np.float64).reshape(-1)
        x = x_t
        layer_inputs: list[np.ndarray] = []
        completion = self._last_completion
        for layer in range(dims.layers):
            pred_x = x_t if layer == 0 else layer_inputs[layer - 1]
            io_sec, other_sec, ids, hits, loaded = self._prefetch(layer, pred_x, step)
            layer_inputs.append(x)
            x, compute_sec, flush = self._compute(layer, x, ids, hits, loaded)
            self._queue_flush(layer, flush)
            step.io_seconds += io_sec
            step.compute_seconds += compute_sec
            completion = self._timeline.unit(io_sec + other_sec, compute_sec)
        step.wall_seconds = completion - self._last_completion
        self._last_completion = completion
        self.stats.steps.append(step)
        self._step_index += 1
        return x, step

    def decode_sequence(self, inputs: np.ndarray) -> np.ndarray:
        outputs = [self.decode_step(x)[0] for x in np.atleast_2d(inputs)]
        return np.stack(outputs)

    # -- internals -----------------------------------------------------

    def _predict_selection(self, layer: int, pred_x: np.ndarray) -> list[int]:
        """Critical groups for a layer, scored on the compressed key cache.
        Rolling-buffer tokens are not scored; they are always resident.
        Groups queued for flush are already in the compressed cache and
        are fair game: their disk write lands before this step's reads."""
        n_flushed = self._logical_groups[layer]
        if n_flushed == 0:
            if self._oracle_recall:
                self.recall_log[-1].append(1.0)
            return []
        q_lr = low_rank_queries(pred_x, self.model.wq[layer],
                                self.projections[layer], self.model.head_map)
        scores = approx_scores(q_lr, self.k_lr.k_lr(layer))
        m_eff = min(self.config.m_groups, n_flushed)
        sel = select_groups(scores, self.config.group_size, m_eff).selected
        if self._oracle_recall:
            self.recall_log[-1].append(self._recall_against_oracle(layer, pred_x, sel, m_eff))
        return sel

    def _recall_against_oracle(self, layer, pred_x, sel, m_eff) -> float:
        from .toymodel import oracle_top_groups, recall_at_m

        dims = self.model.dims
        full = np.vstack(self._full_k[layer]).reshape(-1, dims.h_kv, dims.head_dim)
        q = np.einsum("d,hde->he", np.asarray(pred_x, dtype=np.float64).reshape(-1),
                      self.model.wq[layer])
        oracle = oracle_top_groups(q, full, self.config.group_size, m_eff,
                                   self.model.head_map)
        return recall_at_m(sel, oracle)

    def _prefetch(self, layer, pred_x, step):
        sel = self._predict_selection(layer, pred_x)
        self.selection_log[-1].append(sel)
        flush_sec = self._drain_pending(layer, step)
        ids = [GroupId(layer, j) for j in sel]
        if self.reuse_enabled:
            try:
                res = self.reuse.lookup_and_reserve(ids)
            except ConfigurationError as exc:
                raise ConfigurationError(f"layer {layer}: {exc}") from exc
            hits = {gid: self.reuse.payload(slot) for gid, slot in res.hits.items()}
            misses = res.misses
        else:
            res, hits, misses = None, {}, ids
        t0 = time.perf_counter()
        payloads, iostats = self.store.read_groups(misses)
        elapsed = time.perf_counter() - t0
        loaded = {}
        for p in payloads:
            p.arrays(self.layout)  # decode once, while "loading"
            loaded[p.gid] = p
            if res is not None:
                self.reuse.insert_loaded(p.gid, res.reserved[p.gid], p)
        step.reuse_requests += len(ids)
        step.reuse_hits += len(hits)
        step.bytes_read += iostats.bytes
        read_sec = (estimate_io_time(self.disk_model, iostats.request_blocks)
                    if self.simulated else elapsed)
        other_sec = (self.cost_model.predict_seconds(
                         self.model.dims, self.k_lr.n_tokens(layer), self.k_lr.r, len(sel))
                     + self.cost_model.buffer_seconds(self.reuse.capacity_slots, len(sel)))
        return read_sec + flush_sec, other_sec, ids, hits, loaded

    def _drain_pending(self, layer: int, step: StepStats) -> float:
        """Write groups queued at the previous step, ahead of this step's
        reads; the same layer never reads a group in the step that wrote it."""
        total = 0.0
        for index, k_g, v_g in self._pending_flush[layer]:
            t0 = time.perf_counter()
            self.store.write_group(layer, index, k_g, v_g)
            elapsed = time.perf_counter() - t0
            sec = (estimate_io_time(self.disk_model, [self.layout.slot_stride])
                   if self.simulated else elapsed)
            total += sec
            step.groups_flushed += 1
        self._pending_flush[layer].clear()
        step.flush_seconds += total
        return total

    def _compute(self, layer, x, ids, hits, loaded):
        model = self.model
        k_t, v_t = model.project_kv(layer, x)
        flush = None
        if self.config.rolling_enabled:
            flush = self.rolling.append(layer, k_t[0], v_t[0])
            # a group completed by this token is flushed only after the
            # attention that consumes it; until then it rides the mapping
            # as the step's rolling segment
            rk, rv = flush if flush is not None else self.rolling.entries(layer)
        else:
            self._holding_k[layer].append(k_t[0])
            self._holding_v[layer].append(v_t[0])
            if len(self._holding_k[layer]) == self.config.group_size:
                flush = (np.stack(self._holding_k[layer]), np.stack(self._holding_v[layer]))
                self._holding_k[layer].clear()
                self._holding_v[layer].clear()
            rk = rv = np.empty((0, 0, 0))
        mapping = build_mapping(ids, hits, loaded, rk, rv, self.layout)
        k_all, v_all = mapping.materialize()
        if k_all.size == 0:
            raise ConfigurationError(f"layer {layer}: nothing attendable")
        q = model.project_q(layer, x)[0]
        attn = exact_attention(q, k_all, v_all, model.head_map)
        out = model.block_output(layer, x, attn)
        compute_sec = self.cost_model.layer_compute_seconds(model.dims, k_all.shape[0])
        return out, compute_sec, flush

    def _queue_flush(self, layer, flush) -> None:
        """Adopt a completed group into the compressed cache immediately
        (so the next step can predict it) and queue its disk write."""
        if flush is None:
            return
        k_g, v_g = flush
        index = self._logical_groups[layer]
        self._logical_groups[layer] += 1
        self._pending_flush[layer].append((index, k_g, v_g))
        self.k_lr.append(layer, k_g.reshape(self.config.group_size, -1),
                         self.projections[layer])
        if self._oracle_recall:
            self._full_k[layer].append(k_g.reshape(self.config.group_size, -1).copy())

    def finalize(self) -> None:
        """Write any still-queued groups; call before closing a file store."""
        sink = StepStats(step=-1)
        for layer in range(self.model.dims.layers):
            self._drain_pending(layer, sink)

    # -- introspection ---------------------------------------------------

    def attendable_positions(self, layer: int) -> set[int]:
        """Token positions visible to attention at the next step: every
        flushed (predictable) position plus the rolling-buffer tokens."""
        flushed = self._logical_groups[layer] * self.config.group_size
        visible = set(range(flushed))
        if self.config.rolling_enabled:
            visible |= set(range(flushed, flushed + self.rolling.length(layer)))
        return visible

    def total_positions(self, layer: int) -> int:
        held = len(self._holding_k[layer])
        rolled = self.rolling.length(layer) if self.config.rolling_enabled else 0
        return self._logical_groups[layer] * self.config.group_size + rolled + held

    def write_selection_log(self, path) -> None:
        with open(path, "w") as f:
            for t, per_layer in enumerate(self.selection_log):
                for layer, sel in enumerate(per_layer):
                    f.write(json.dumps({"step": t, "layer": layer, "selected": sel}) + "\n")


def overlap_ratio(selection_log: list) -> np.ndarray:
    """Fraction of each step's selected groups already selected at the
    previous step; an empty selection counts as fully overlapped."""
    if len(selection_log) < 2:
        raise ParameterError("need at least two steps")
    ratios = np.empty(len(selection_log) - 1)
    for j in range(1, len(selection_log)):
        cur, prev = set(selection_log[j]), set(selection_log[j - 1])
        ratios[j - 1] = len(cur & prev) / len(cur) if cur else 1.0
    return ratios


def build_engine(model: ToyModel, config: RuntimeConfig,
                 projections: dict[int, ProjectionMatrix], max_tokens: int,
                 backend: str = "sim", disk_model: DiskModel | None = None,
                 path=None, cost_model: ComputeCostModel | None = None) -> Engine:
    """Wire up storage and construct an Engine.

    ``backend`` is "sim" (in-memory store timed by ``disk_model``) or
    "file" (real file at ``path``, wall-clock timing, serialized).
    """
    dims = model.dims
    layout = DiskLayout(dims.layers, dims.h_kv, dims.head_dim, config.group_size,
                        config.elem_bytes, config.block_align)
    if backend == "sim":
        if disk_model is None:
            raise ParameterError("simulated backend needs a disk model")
        store = MemoryStore(layout, max_tokens)
        return Engine(model, config, projections, store, disk_model, cost_model)
    if backend == "file":
        if path is None:
            raise ParameterError("file backend needs a path")
        store = FileStore.create(path, layout, max_tokens)
        return Engine(model, config, projections, store, None, cost_model)
    raise ParameterError(f"unknown backend {backend!r}")
