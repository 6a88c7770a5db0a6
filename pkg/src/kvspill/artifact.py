"""Tuning artifact: the JSON document produced offline and consumed at run
time. Matrices travel as base64 blobs of raw little-endian float64 bytes,
so reloading is bit-exact; everything else is ordinary human-diffable
JSON sorted by key.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field

import numpy as np

from .compress import ProjectionMatrix
from .errors import ArtifactMismatchError, MalformedInputError
from .toymodel import ModelDims
from .tuner import LookupTables, Solution, SolutionTable

ARTIFACT_VERSION = 1


def _encode_matrix(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "dtype": "<f8",
            "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode_matrix(obj: dict) -> np.ndarray:
    try:
        raw = base64.b64decode(obj["data"])
        return np.frombuffer(raw, dtype=obj["dtype"]).reshape(obj["shape"]).copy()
    except (KeyError, ValueError, TypeError) as exc:
        raise MalformedInputError(f"bad matrix block: {exc}") from exc


@dataclass
class TuningArtifact:
    dims: ModelDims
    model_seed: int
    mg_const: int
    preset: str
    seed: int
    lookup: LookupTables
    solutions: SolutionTable
    meta: dict = field(default_factory=dict)
    version: int = ARTIFACT_VERSION

    def to_json(self) -> str:
        doc = {
            "version": self.version,
            "model": {
                "layers": self.dims.layers, "model_dim": self.dims.model_dim,
                "h_q": self.dims.h_q, "h_kv": self.dims.h_kv,
                "head_dim": self.dims.head_dim, "seed": self.model_seed,
            },
            "mg_const": self.mg_const,
            "preset": self.preset,
            "seed": self.seed,
            "reuse_rate": [[c, r] for c, r in self.lookup.reuse_rate],
            "projections": {
                f"{sigma:g}": {
                    str(layer): _encode_matrix(proj.a)
                    for layer, proj in per_layer.items()
                }
                for sigma, per_layer in self.lookup.projections.items()
            },
            "solutions": [
                {"b": b, "s": s, **sol.as_dict()}
                for (b, s), sol in sorted(self.solutions.entries.items())
            ],
            "meta": self.meta,
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_json())
            f.write("\n")

    @classmethod
    def load(cls, path) -> "TuningArtifact":
        try:
            with open(path) as f:
                doc = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise MalformedInputError(f"cannot load artifact {path}: {exc}") from exc
        try:
            if doc["version"] != ARTIFACT_VERSION:
                raise MalformedInputError(f"unsupported artifact version {doc['version']}")
            m = doc["model"]
            dims = ModelDims(layers=m["layers"], model_dim=m["model_dim"],
                             h_q=m["h_q"], h_kv=m["h_kv"], head_dim=m["head_dim"])
            projections = {
                float(sigma): {
                    int(layer): ProjectionMatrix(a=_decode_matrix(block), sigma=float(sigma))
                    for layer, block in per_layer.items()
                }
                for sigma, per_layer in doc["projections"].items()
            }
            lookup = LookupTables(
                reuse_rate=[(int(c), float(r)) for c, r in doc["reuse_rate"]],
                projections=projections)
            table = SolutionTable()
            for row in doc["solutions"]:
                table.put(row["b"], row["s"],
                          Solution(g=row["g"], sigma=row["sigma"], m=row["m"],
                                   c=row["c"], feasible=row["feasible"]))
            return cls(dims=dims, model_seed=m["seed"], mg_const=doc["mg_const"],
                       preset=doc["preset"], seed=doc["seed"], lookup=lookup,
                       solutions=table, meta=doc.get("meta", {}))
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedInputError(f"malformed artifact {path}: {exc}") from exc

    def check_model(self, dims: ModelDims, model_seed: int) -> None:
        if dims != self.dims or model_seed != self.model_seed:
            raise ArtifactMismatchError(
                f"artifact was tuned for {self.dims} (seed {self.model_seed}), "
                f"got {dims} (seed {model_seed})")
