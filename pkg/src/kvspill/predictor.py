"""Grouped critical-KV prediction from the compressed key cache.

Scores are raw query-key dot products in the projected space: no softmax
and no 1/sqrt(d) scaling, since only the relative order after summing
across heads matters for group selection. ``scaled`` opts into 1/sqrt(d)
scaling for callers that want comparable magnitudes across head sizes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .compress import ProjectionMatrix
from .errors import ParameterError


@dataclass(frozen=True)
class HeadMap:
    """GQA query-head to KV-head assignment: contiguous blocks of
    h_q / h_kv query heads share one KV head."""

    h_q: int
    h_kv: int

    def __post_init__(self):
        if self.h_q < 1 or self.h_kv < 1 or self.h_q % self.h_kv:
            raise ParameterError(f"h_q={self.h_q} must be a multiple of h_kv={self.h_kv}")

    @property
    def heads_per_group(self) -> int:
        return self.h_q // self.h_kv

    def kv_head(self, h: int) -> int:
        return h // self.heads_per_group


@dataclass
class GroupScoreSet:
    """Per-token scores, per-group maxima, and the chosen group indices."""

    token_scores: np.ndarray
    group_scores: np.ndarray
    selected: list[int] = field(default_factory=list)


def low_rank_queries(
    x_prev: np.ndarray,
    q_weights: np.ndarray,
    proj: ProjectionMatrix,
    head_map: HeadMap,
    scaled: bool = False,
) -> np.ndarray:
    """Per-head low-rank query vectors (h_q x r).

    ``x_prev`` is the 1 x model_dim embedding standing in for the target
    layer's input; ``q_weights`` holds that layer's per-head query
    projections as (h_q, model_dim, head_dim). Each head's query is pushed
    through the d x r block of A belonging to its shared KV head.
    """
    x_prev = np.asarray(x_prev, dtype=np.float64).reshape(-1)
    q_weights = np.asarray(q_weights, dtype=np.float64)
    if q_weights.ndim != 3 or q_weights.shape[0] != head_map.h_q:
        raise ParameterError(f"bad query weight shape {q_weights.shape}")
    h_q, model_dim, d = q_weights.shape
    if x_prev.shape[0] != model_dim:
        raise ParameterError(f"embedding dim {x_prev.shape[0]} != {model_dim}")
    if proj.joint_dim != head_map.h_kv * d:
        raise ParameterError(
            f"projection rows {proj.joint_dim} != h_kv*d = {head_map.h_kv * d}"
        )
    out = np.empty((h_q, proj.r))
    for h in range(h_q):
        q_h = x_prev @ q_weights[h]
        if scaled:
            q_h = q_h / np.sqrt(d)
        out[h] = q_h @ proj.head_slice(head_map.kv_head(h), d)
    return out


def approx_scores(q_lr: np.ndarray, k_lr: np.ndarray) -> np.ndarray:
    """Approximate pre-softmax attention logits, h_q x N."""
    q_lr = np.asarray(q_lr, dtype=np.float64)
    k_lr = np.asarray(k_lr, dtype=np.float64)
    if q_lr.ndim != 2 or k_lr.ndim != 2 or q_lr.shape[1] != k_lr.shape[1]:
        raise ParameterError(f"rank mismatch: {q_lr.shape} vs {k_lr.shape}")
    return q_lr @ k_lr.T


def select_groups(scores: np.ndarray, group_size: int, m: int) -> GroupScoreSet:
    """Sum scores across heads, reduce each group of ``group_size``
    consecutive tokens to its max, and pick the top ``m`` groups.

    Ties break toward the lower group index and the selection is returned
    in ascending index order so disk reads can coalesce.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[1] < 1:
        raise ParameterError(f"bad score matrix shape {scores.shape}")
    if group_size < 1:
        raise ParameterError("group size must be positive")
    n = scores.shape[1]
    n_groups = -(-n // group_size)
    if not 0 <= m <= n_groups:
        raise ParameterError(f"m={m} exceeds group count {n_groups}")
    token_scores = scores.sum(axis=0)
    pad = n_groups * group_size - n
    padded = np.concatenate([token_scores, np.full(pad, -np.inf)]) if pad else token_scores
    group_scores = padded.reshape(n_groups, group_size).max(axis=1)
    # stable sort on negated scores => ties resolve to the lower index
    order = np.argsort(-group_scores, kind="stable")
    selected = sorted(int(i) for i in order[:m])
    return GroupScoreSet(token_scores=token_scores, group_scores=group_scores, selected=selected)
