"""Synthetic decode workloads with controllable temporal locality.

Each workload is a deterministic embedding sequence: a position-smooth
random prompt and one query embedding per decode step. Query embeddings
point at a planted window of prompt positions, so (through the toy
model's query-key coupling) the exact-attention critical groups track
the window. The window's start is resampled each step with probability
``drift``: drift 0 pins the critical set, drift 1 rescrambles it every
step.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass

import numpy as np

from .errors import MalformedInputError, ParameterError


@dataclass(frozen=True)
class SyntheticWorkload:
    seed: int = 0
    context_len: int = 512
    steps: int = 64
    drift: float = 0.2
    locality_width: int = 64  # tokens covered by the planted window
    query_noise: float = 0.3  # fraction of the query drawn off-window

    def __post_init__(self):
        if not 0.0 <= self.drift <= 1.0:
            raise ParameterError("drift must lie in [0, 1]")
        if not 0.0 <= self.query_noise <= 1.0:
            raise ParameterError("query_noise must lie in [0, 1]")
        if self.locality_width > self.context_len:
            raise ParameterError("locality window larger than the context")


@dataclass
class GeneratedWorkload:
    spec: SyntheticWorkload
    prompt: np.ndarray  # (context_len, model_dim)
    step_inputs: np.ndarray  # (steps, model_dim)
    window_starts: np.ndarray  # (steps,) planted window start per step


def smooth_embeddings(rng, length: int, dim: int, corr_len: float) -> np.ndarray:
    """Position-smooth embedding rows (a stationary AR(1) walk): nearby
    tokens share a local direction, the way adjacent positions in real
    prompts do. ``corr_len`` is the decay length in tokens."""
    rho = float(np.exp(-1.0 / max(corr_len, 1e-9)))
    x = np.empty((length, dim))
    x[0] = rng.standard_normal(dim)
    for t in range(1, length):
        x[t] = rho * x[t - 1] + np.sqrt(1 - rho * rho) * rng.standard_normal(dim)
    return x / np.sqrt(dim)


def gen_workload(spec: SyntheticWorkload, model_dim: int) -> GeneratedWorkload:
    rng = np.random.default_rng(spec.seed)
    dm = model_dim
    prompt = smooth_embeddings(rng, spec.context_len, dm, spec.locality_width / 2)
    w = spec.locality_width
    hi = spec.context_len - w + 1
    starts = np.empty(spec.steps, dtype=int)
    inputs = np.empty((spec.steps, dm))

    def draw_query(start):
        # noise is drawn per window tenure, not per step, so a static
        # window yields a static query (and a static critical set)
        target = prompt[start : start + w].sum(axis=0) / np.sqrt(w)
        noise = rng.standard_normal(dm) / np.sqrt(dm)
        x = (1 - spec.query_noise) * target + spec.query_noise * noise
        return x / max(np.linalg.norm(x), 1e-12) * 2.0

    start = int(rng.integers(0, hi))
    query = draw_query(start)
    for t in range(spec.steps):
        if t > 0 and rng.random() < spec.drift:
            start = int(rng.integers(0, hi))
            query = draw_query(start)
        starts[t] = start
        inputs[t] = query
    return GeneratedWorkload(spec=spec, prompt=prompt, step_inputs=inputs, window_starts=starts)


def workload_from_parser(cp: configparser.ConfigParser) -> SyntheticWorkload:
    if not cp.has_section("workload"):
        raise MalformedInputError("missing [workload] section")
    sec = cp["workload"]
    try:
        return SyntheticWorkload(
            seed=sec.getint("seed", 0),
            context_len=sec.getint("context_len", 512),
            steps=sec.getint("steps", 64),
            drift=sec.getfloat("drift", 0.2),
            locality_width=sec.getint("locality_width", 64),
            query_noise=sec.getfloat("query_noise", 0.3),
        )
    except ValueError as exc:
        raise MalformedInputError(f"bad workload value: {exc}") from exc


def save_workload(spec: SyntheticWorkload, path) -> None:
    cp = configparser.ConfigParser()
    cp["workload"] = {
        "seed": str(spec.seed),
        "context_len": str(spec.context_len),
        "steps": str(spec.steps),
        "drift": f"{spec.drift:g}",
        "locality_width": str(spec.locality_width),
        "query_noise": f"{spec.query_noise:g}",
    }
    with open(path, "w") as f:
        cp.write(f)
