"""Disk-backed KV cache with low-rank criticality prediction, grouped
prefetch with compute/IO overlap, FIFO reuse caching, and offline
parameter tuning."""

from .artifact import TuningArtifact
from .compress import CompressedKCache, ProjectionMatrix, fit_projection, rank_for_sigma
from .config import load_disk_model, load_preset, save_disk_model
from .kvstore import (
    DiskLayout,
    DiskModel,
    FileStore,
    GroupId,
    MemoryStore,
    effective_bandwidth,
    estimate_io_time,
)
from .membuf import MappingTable, ReuseBuffer, RollingBuffer, build_mapping
from .predictor import GroupScoreSet, HeadMap, approx_scores, low_rank_queries, select_groups
from .runtime import (
    ComputeCostModel,
    DecodeStats,
    Engine,
    RuntimeConfig,
    build_engine,
    overlap_ratio,
)
from .toymodel import (
    ExactDecoder,
    ModelDims,
    ToyModel,
    exact_attention,
    oracle_top_groups,
    recall_at_m,
)
from .tuner import (
    LookupTables,
    ProfileTables,
    Solution,
    SolutionTable,
    TunerConfig,
    build_reuse_lookup,
    build_solution_table,
    fit_projection_family,
    profile,
    query_solution,
    solve,
)
from .workload import SyntheticWorkload, gen_workload

__version__ = "0.1.0"
