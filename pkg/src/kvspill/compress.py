"""Low-rank in-memory K cache: offline projection fitting, online appends.

The key matrix of a layer, flattened to N x (h_kv * head_dim), is projected
through a precomputed orthonormal basis A onto r dimensions, where
``r = round(h_kv * head_dim / sigma)``. The projected rows are kept in
memory purely for criticality prediction; attention itself always runs on
the full-precision entries fetched from storage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .linalg import orthonormality_defect, svd_top_r

ORTHO_TOL = 1e-6


def rank_for_sigma(joint_dim: int, sigma: float) -> int:
    """Round-to-nearest rank for a compression ratio, floored at 1."""
    if sigma < 1:
        raise ParameterError(f"sigma must be >= 1, got {sigma}")
    return max(1, round(joint_dim / sigma))


@dataclass
class ProjectionMatrix:
    """Orthonormal basis A of shape (h_kv * head_dim, r)."""

    a: np.ndarray
    sigma: float

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        if self.a.ndim != 2 or self.a.shape[1] < 1:
            raise ParameterError(f"bad projection shape {self.a.shape}")
        if self.sigma < 1:
            raise ParameterError(f"sigma must be >= 1, got {self.sigma}")
        if orthonormality_defect(self.a) > ORTHO_TOL:
            raise ParameterError("projection columns are not orthonormal")

    @property
    def joint_dim(self) -> int:
        return self.a.shape[0]

    @property
    def r(self) -> int:
        return self.a.shape[1]

    def head_slice(self, kv_head: int, head_dim: int) -> np.ndarray:
        """The d x r block of A addressing one KV head's embedding rows."""
        return self.a[kv_head * head_dim : (kv_head + 1) * head_dim, :]


def fit_projection(k_samples: np.ndarray, sigma: float) -> ProjectionMatrix:
    """Fit the joint-head projection from sampled flattened keys.

    ``k_samples`` is N x (h_kv * head_dim); the basis is the top-r right
    singular subspace of the sample matrix.
    """
    k_samples = np.asarray(k_samples, dtype=np.float64)
    if k_samples.ndim != 2:
        raise ParameterError(f"expected 2-D samples, got shape {k_samples.shape}")
    n, joint = k_samples.shape
    r = rank_for_sigma(joint, sigma)
    if n < r:
        raise ParameterError(f"need at least r={r} sample rows, got {n}")
    return ProjectionMatrix(a=svd_top_r(k_samples, r), sigma=sigma)


class CompressedKCache:
    """Per-layer projected key rows, appended as groups reach disk."""

    def __init__(self, num_layers: int, r: int):
        self.num_layers = num_layers
        self.r = r
        self._rows: list[list[np.ndarray]] = [[] for _ in range(num_layers)]
        self._counts = [0] * num_layers
        self._cache: list[np.ndarray | None] = [None] * num_layers

    def n_tokens(self, layer: int) -> int:
        return self._counts[layer]

    def append(self, layer: int, k_rows: np.ndarray, proj: ProjectionMatrix) -> None:
        """Project and append flattened key rows (m x joint_dim)."""
        k_rows = np.asarray(k_rows, dtype=np.float64)
        if k_rows.ndim != 2 or k_rows.shape[1] != proj.joint_dim:
            raise ParameterError(
                f"key rows have shape {k_rows.shape}, expected (m, {proj.joint_dim})"
            )
        if proj.r != self.r:
            raise ParameterError(f"projection rank {proj.r} != cache rank {self.r}")
        if k_rows.shape[0] == 0:
            return
        self._rows[layer].append(k_rows @ proj.a)
        self._counts[layer] += k_rows.shape[0]
        self._cache[layer] = None

    def k_lr(self, layer: int) -> np.ndarray:
        """The layer's N x r compressed key matrix (empty-safe)."""
        if self._cache[layer] is None:
            rows = self._rows[layer]
            if rows:
                self._cache[layer] = np.vstack(rows)
            else:
                self._cache[layer] = np.empty((0, self.r))
        return self._cache[layer]

    def memory_bytes(self) -> int:
        return sum(self._counts) * self.r * 8
