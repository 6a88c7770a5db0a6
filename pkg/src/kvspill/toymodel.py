"""Self-contained multi-layer GQA attention model with exact oracles.

The model is deliberately small and untrained: fixed-seed Gaussian
projections, residual connections, and a one-hidden-layer MLP per block.
One deliberate quirk: each KV head's key projection shares a common
component with the query projections of the heads mapped to it
(``query_key_coupling``). That makes query-key dot products track embedding
alignment, which is what lets the synthetic workloads steer which token
positions score high.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .predictor import HeadMap, select_groups


@dataclass(frozen=True)
class ModelDims:
    layers: int = 4
    model_dim: int = 256
    h_q: int = 8
    h_kv: int = 2
    head_dim: int = 32

    def __post_init__(self):
        if self.h_q % self.h_kv:
            raise ParameterError("h_q must be divisible by h_kv")

    @property
    def joint_dim(self) -> int:
        return self.h_kv * self.head_dim


class ToyModel:
    """Fixed-seed toy transformer stack exposing raw projection weights."""

    def __init__(self, dims: ModelDims = ModelDims(), seed: int = 0,
                 query_key_coupling: float = 0.7):
        self.dims = dims
        self.seed = seed
        self.head_map = HeadMap(dims.h_q, dims.h_kv)
        rng = np.random.default_rng(seed)
        d, dm = dims.head_dim, dims.model_dim
        scale = 1.0 / np.sqrt(dm)
        self.wq = []  # (h_q, model_dim, d) per layer
        self.wk = []  # (h_kv, model_dim, d) per layer
        self.wv = []
        self.wo = []  # (h_q*d, model_dim) per layer
        self.w1 = []
        self.w2 = []
        per_kv = self.head_map.heads_per_group
        for _ in range(dims.layers):
            wq = rng.standard_normal((dims.h_q, dm, d)) * scale
            wk = np.empty((dims.h_kv, dm, d))
            for g in range(dims.h_kv):
                shared = wq[g * per_kv : (g + 1) * per_kv].mean(axis=0)
                shared = shared / max(np.linalg.norm(shared), 1e-12) * np.sqrt(dm * d) * scale
                fresh = rng.standard_normal((dm, d)) * scale
                wk[g] = query_key_coupling * shared + (1 - query_key_coupling) * fresh
            self.wq.append(wq)
            self.wk.append(wk)
            self.wv.append(rng.standard_normal((dims.h_kv, dm, d)) * scale)
            self.wo.append(rng.standard_normal((dims.h_q * d, dm)) * (1.0 / np.sqrt(dims.h_q * d)))
            self.w1.append(rng.standard_normal((dm, dm)) * scale)
            self.w2.append(rng.standard_normal((dm, dm)) * scale)

    def project_kv(self, layer: int, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """K and V of shape (tokens, h_kv, d) for embeddings x (tokens, dm)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        k = np.einsum("td,hde->the", x, self.wk[layer])
        v = np.einsum("td,hde->the", x, self.wv[layer])
        return k, v

    def project_q(self, layer: int, x: np.ndarray) -> np.ndarray:
        """Queries of shape (tokens, h_q, d)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return np.einsum("td,hde->the", x, self.wq[layer])

    def block_output(self, layer: int, x: np.ndarray, attn: np.ndarray) -> np.ndarray:
        """Residual + output projection + MLP for one token."""
        y = x + attn.reshape(-1) @ self.wo[layer]
        return y + np.tanh(y @ self.w1[layer]) @ self.w2[layer]


def exact_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                    head_map: HeadMap) -> np.ndarray:
    """Standard scaled softmax attention for one query token under GQA.

    ``q`` is (h_q, d); ``k`` and ``v`` are (N, h_kv, d). Returns (h_q, d).
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if k.shape[0] == 0:
        raise ParameterError("attention needs at least one KV entry")
    d = q.shape[-1]
    out = np.empty_like(q)
    for h in range(head_map.h_q):
        g = head_map.kv_head(h)
        logits = k[:, g, :] @ q[h] / np.sqrt(d)
        logits -= logits.max()
        w = np.exp(logits)
        w /= w.sum()
        out[h] = w @ v[:, g, :]
    return out


def exact_scores(q: np.ndarray, k: np.ndarray, head_map: HeadMap) -> np.ndarray:
    """Raw per-head query-key logits (h_q, N) on the uncompressed keys."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    return np.stack([k[:, head_map.kv_head(h), :] @ q[h] for h in range(head_map.h_q)])


def oracle_top_groups(q, k, group_size: int, m: int, head_map: HeadMap) -> list[int]:
    """Group selection on exact scores; the reference the predictor chases."""
    return select_groups(exact_scores(q, k, head_map), group_size, m).selected


def recall_at_m(predicted, oracle) -> float:
    predicted, oracle = set(predicted), set(oracle)
    if not oracle:
        raise ParameterError("oracle selection is empty")
    return len(predicted & oracle) / len(oracle)


class ExactDecoder:
    """Full-attention reference trajectory over a prompt plus decode steps.

    Keeps the complete uncompressed KV per layer and records every layer's
    input embedding, so components can be tested against exact behaviour.
    """

    def __init__(self, model: ToyModel):
        self.model = model
        self.k = [None] * model.dims.layers  # (N, h_kv, d) each
        self.v = [None] * model.dims.layers
        self.layer_inputs: list[np.ndarray] = []  # last step's per-layer inputs

    def prefill(self, prompt: np.ndarray) -> None:
        """Causal full-attention pass over the prompt embeddings."""
        model = self.model
        x = np.asarray(prompt, dtype=np.float64)
        s = x.shape[0]
        d = model.dims.head_dim
        hm = model.head_map
        causal = np.triu(np.full((s, s), -np.inf), k=1)
        for layer in range(model.dims.layers):
            k, v = model.project_kv(layer, x)
            q = model.project_q(layer, x)
            outs = np.empty((s, model.dims.h_q, d))
            for h in range(model.dims.h_q):
                g = hm.kv_head(h)
                logits = q[:, h, :] @ k[:, g, :].T / np.sqrt(d) + causal
                logits -= logits.max(axis=1, keepdims=True)
                w = np.exp(logits)
                w /= w.sum(axis=1, keepdims=True)
                outs[:, h, :] = w @ v[:, g, :]
            self.k[layer], self.v[layer] = k, v
            y = x + outs.reshape(s, -1) @ model.wo[layer]
            x = y + np.tanh(y @ model.w1[layer]) @ model.w2[layer]

    def step(self, x_t: np.ndarray) -> np.ndarray:
        """One exact decode step; appends the new KV and returns the output."""
        model = self.model
        x = np.asarray(x_t, dtype=np.float64).reshape(-1)
        self.layer_inputs = []
        for layer in range(model.dims.layers):
            self.layer_inputs.append(x)
            k_t, v_t = model.project_kv(layer, x)
            self.k[layer] = np.concatenate([self.k[layer], k_t], axis=0)
            self.v[layer] = np.concatenate([self.v[layer], v_t], axis=0)
            q = model.project_q(layer, x)[0]
            attn = exact_attention(q, self.k[layer], self.v[layer], model.head_map)
            x = model.block_output(layer, x, attn)
        return x
