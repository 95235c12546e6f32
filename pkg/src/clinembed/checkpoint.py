"""Versioned JSON checkpoints.

Arrays are stored as ``{"shape": [...], "data": [...]}`` with floats written by
``json`` (shortest round-trip repr), so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import IoError, SchemaError

SCHEMA_VERSION = 1
MODEL_KINDS = ("tokenizer", "mlm", "downstream")


@dataclass
class Checkpoint:
    model_kind: str
    schema_hash: str
    config: dict
    arrays: dict
    seed: int
    metadata: dict = field(default_factory=dict)
    schema: dict | None = None
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise SchemaError(f"unknown model kind {self.model_kind!r}")

    def to_dict(self):
        return {
            "schema_version": self.schema_version,
            "model_kind": self.model_kind,
            "schema_hash": self.schema_hash,
            "schema": self.schema,
            "config": self.config,
            "seed": self.seed,
            "metadata": self.metadata,
            "arrays": {k: {"shape": list(np.shape(v)), "data": np.asarray(v, dtype=np.float64).reshape(-1).tolist()}
                       for k, v in sorted(self.arrays.items())},
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")) + "\n"

    def save(self, path):
        try:
            with open(path, "w") as fh:
                fh.write(self.dumps())
        except OSError as exc:
            raise IoError(f"cannot write checkpoint {path}: {exc}") from None

    @classmethod
    def from_dict(cls, doc):
        version = doc.get("schema_version")
        if version != SCHEMA_VERSION:
            raise SchemaError(f"unsupported checkpoint version {version}")
        arrays = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in doc["arrays"].items()}
        return cls(
            model_kind=doc["model_kind"], schema_hash=doc["schema_hash"], config=doc["config"],
            arrays=arrays, seed=doc["seed"], metadata=doc.get("metadata", {}),
            schema=doc.get("schema"), schema_version=version,
        )

    @classmethod
    def load(cls, path, expected_schema_hash: str | None = None):
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise IoError(f"cannot read checkpoint {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path} is not a checkpoint: {exc}") from None
        ckpt = cls.from_dict(doc)
        if expected_schema_hash is not None:
            ckpt.check_schema(expected_schema_hash)
        return ckpt

    def check_schema(self, schema_hash: str):
        if self.schema_hash != schema_hash:
            raise SchemaError(f"checkpoint schema {self.schema_hash} does not match active schema {schema_hash}")

    def subset(self, prefix: str) -> dict:
        return {k: v for k, v in self.arrays.items() if k.startswith(prefix)}
