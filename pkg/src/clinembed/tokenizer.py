"""Feature schema and the per-feature tokenizer.

A numerical feature ``i`` with z-scored value ``v`` maps to ``v * W_num[i] + b_num[i]``;
a categorical feature ``k`` with code ``c`` maps to ``W_cat[k][c] + b_cat[k]``.
Categorical tables are stored stacked in one ``(sum(cardinalities), m)`` matrix.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import SchemaError

NUMERICAL = "numerical"
CATEGORICAL = "categorical"


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str
    cardinality: int | None = None
    mean: float | None = None
    std: float | None = None
    mode: int | None = None

    @property
    def is_numerical(self):
        return self.kind == NUMERICAL


class FeatureSchema:
    def __init__(self, features):
        self.features = tuple(features)
        self._validate()
        self.names = [f.name for f in self.features]
        self.numerical_idx = np.array([i for i, f in enumerate(self.features) if f.is_numerical])
        self.categorical_idx = np.array([i for i, f in enumerate(self.features) if not f.is_numerical])
        self.cardinalities = [self.features[i].cardinality for i in self.categorical_idx]
        self.cat_offsets = np.concatenate([[0], np.cumsum(self.cardinalities)[:-1]]).astype(int)

    def _validate(self):
        feats = self.features
        if len(feats) < 2:
            raise SchemaError("schema needs at least two features")
        names = [f.name for f in feats]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate feature names")
        kinds = {f.kind for f in feats}
        if not kinds <= {NUMERICAL, CATEGORICAL}:
            raise SchemaError(f"unknown feature kind in {sorted(kinds)}")
        if kinds != {NUMERICAL, CATEGORICAL}:
            raise SchemaError("schema needs at least one numerical and one categorical feature")
        for f in feats:
            if f.is_numerical:
                if f.std is not None and not f.std > 0:
                    raise SchemaError(f"feature {f.name}: std must be positive")
            elif f.cardinality is None or f.cardinality < 2:
                raise SchemaError(f"feature {f.name}: cardinality must be >= 2")

    @property
    def d(self):
        return len(self.features)

    @property
    def n_numerical(self):
        return len(self.numerical_idx)

    @property
    def n_categorical(self):
        return len(self.categorical_idx)

    @property
    def total_categories(self):
        return int(sum(self.cardinalities))

    def index(self, name):
        try:
            return self.names.index(name)
        except ValueError:
            raise SchemaError(f"unknown feature {name!r}") from None

    def __getitem__(self, name):
        return self.features[self.index(name)]

    def numerical_names(self):
        return [self.names[i] for i in self.numerical_idx]

    def categorical_names(self):
        return [self.names[i] for i in self.categorical_idx]

    @property
    def has_stats(self):
        return all((f.mean is not None and f.std is not None) if f.is_numerical else f.mode is not None
                   for f in self.features)

    def with_stats(self, stats: dict) -> "FeatureSchema":
        """Copy with per-feature stats; ``stats`` maps name -> dict of mean/std/mode."""
        return FeatureSchema([replace(f, **stats.get(f.name, {})) for f in self.features])

    def structure(self):
        return [[f.name, f.kind, f.cardinality] for f in self.features]

    def structure_hash(self) -> str:
        blob = json.dumps(self.structure(), separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def to_dict(self):
        return {"features": [{k: v for k, v in asdict(f).items() if v is not None} for f in self.features]}

    @classmethod
    def from_dict(cls, doc):
        try:
            feats = [FeatureSpec(**f) for f in doc["features"]]
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed schema document: {exc}") from None
        return cls(feats)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def __eq__(self, other):
        return isinstance(other, FeatureSchema) and self.features == other.features

    def __repr__(self):
        return f"FeatureSchema(d={self.d}, numerical={self.n_numerical}, categorical={self.n_categorical})"


# Abbreviations follow the MIMIC-III benchmark feature list.
DEFAULT_NUMERICAL = ["DBP", "FIO", "HR", "MBP", "OS", "RR", "SBP", "Temp"]
DEFAULT_CATEGORICAL = {"CRR": 2, "GCST": 13, "GCSEO": 4, "GCSMR": 6, "GCSVR": 5}


def default_schema() -> FeatureSchema:
    feats = [FeatureSpec(n, NUMERICAL) for n in DEFAULT_NUMERICAL]
    feats += [FeatureSpec(n, CATEGORICAL, cardinality=c) for n, c in DEFAULT_CATEGORICAL.items()]
    return FeatureSchema(feats)


class TokenizerParams:
    """Leaf tensors of the tokenizer, stacked by feature kind."""

    def __init__(self, schema: FeatureSchema, W_num, b_num, W_cat, b_cat, mask_vec):
        self.schema = schema
        self.W_num = W_num
        self.b_num = b_num
        self.W_cat = W_cat
        self.b_cat = b_cat
        self.mask_vec = mask_vec
        m = mask_vec.shape[0]
        expected = {
            "W_num": (schema.n_numerical, m), "b_num": (schema.n_numerical, m),
            "W_cat": (schema.total_categories, m), "b_cat": (schema.n_categorical, m),
            "mask_vec": (m,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise SchemaError(f"tokenizer {name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def m(self):
        return self.mask_vec.shape[0]

    def params(self, prefix="tokenizer."):
        return {prefix + k: getattr(self, k) for k in ("W_num", "b_num", "W_cat", "b_cat", "mask_vec")}

    def set_trainable(self, flag: bool):
        for t in self.params().values():
            t.requires_grad = flag
            if flag and t.node_id is None:
                t.node_id = next(ad._ids)

    def num_row(self, name):
        """(W, b) numpy rows for one numerical feature."""
        pos = self._num_pos(name)
        return self.W_num.data[pos], self.b_num.data[pos]

    def cat_rows(self, name):
        """(W block of shape (cardinality, m), b) for one categorical feature."""
        s = self.schema
        k = s.categorical_names().index(name) if name in s.categorical_names() else None
        if k is None:
            raise SchemaError(f"{name!r} is not a categorical feature")
        off = s.cat_offsets[k]
        return self.W_cat.data[off:off + s.cardinalities[k]], self.b_cat.data[k]

    def _num_pos(self, name):
        names = self.schema.numerical_names()
        if name not in names:
            raise SchemaError(f"{name!r} is not a numerical feature")
        return names.index(name)

    def to_arrays(self) -> dict:
        """Feature-keyed arrays for checkpoints."""
        out = {}
        for name in self.schema.numerical_names():
            W, b = self.num_row(name)
            out[f"tokenizer.num.{name}.W"] = W
            out[f"tokenizer.num.{name}.b"] = b
        for name in self.schema.categorical_names():
            W, b = self.cat_rows(name)
            out[f"tokenizer.cat.{name}.W"] = W
            out[f"tokenizer.cat.{name}.b"] = b
        out["tokenizer.mask_vec"] = self.mask_vec.data
        return out

    @classmethod
    def from_arrays(cls, schema: FeatureSchema, arrays: dict, requires_grad=True):
        try:
            W_num = np.stack([arrays[f"tokenizer.num.{n}.W"] for n in schema.numerical_names()])
            b_num = np.stack([arrays[f"tokenizer.num.{n}.b"] for n in schema.numerical_names()])
            W_cat = np.concatenate([arrays[f"tokenizer.cat.{n}.W"] for n in schema.categorical_names()])
            b_cat = np.stack([arrays[f"tokenizer.cat.{n}.b"] for n in schema.categorical_names()])
            mask = np.asarray(arrays["tokenizer.mask_vec"])
        except KeyError as exc:
            raise SchemaError(f"checkpoint lacks tokenizer array {exc}") from None
        mk = lambda a: Tensor(a, requires_grad=requires_grad)  # noqa: E731
        return cls(schema, mk(W_num), mk(b_num), mk(W_cat), mk(b_cat), mk(mask))


def init_tokenizer(schema: FeatureSchema, m: int, seed: int) -> TokenizerParams:
    if m < 2:
        raise SchemaError(f"embedding dim must be >= 2, got {m}")
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(m)

    def u(*shape):
        return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

    return TokenizerParams(
        schema,
        W_num=u(schema.n_numerical, m),
        b_num=u(schema.n_numerical, m),
        W_cat=u(schema.total_categories, m),
        b_cat=u(schema.n_categorical, m),
        mask_vec=u(m),
    )


def check_codes(x: np.ndarray, schema: FeatureSchema) -> np.ndarray:
    """Integer codes of the categorical columns of ``x``; raises on invalid codes."""
    raw = x[..., schema.categorical_idx]
    codes = raw.astype(np.int64)
    if not np.array_equal(codes, raw):
        raise SchemaError("categorical entries must be integer codes")
    card = np.asarray(schema.cardinalities)
    if np.any(codes < 0) or np.any(codes >= card):
        bad = np.argwhere((codes < 0) | (codes >= card))[0]
        name = schema.categorical_names()[bad[-1]]
        raise SchemaError(f"categorical code out of range for {name}")
    return codes


def tokenize(x, params: TokenizerParams) -> Tensor:
    """Embed feature vectors ``x`` of shape ``(..., d)`` to ``(..., d, m)``."""
    schema = params.schema
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != schema.d:
        raise SchemaError(f"expected {schema.d} features, got {x.shape[-1]}")
    codes = check_codes(x, schema) + schema.cat_offsets
    num = Tensor(x[..., schema.numerical_idx, None])
    e_num = ad.add(ad.mul(num, params.W_num), params.b_num)
    e_cat = ad.add(ad.embedding(params.W_cat, codes), params.b_cat)
    e = ad.concat([e_num, e_cat], axis=-2)
    order = np.concatenate([schema.numerical_idx, schema.categorical_idx])
    if not np.array_equal(order, np.arange(schema.d)):
        e = ad.index(e, (Ellipsis, np.argsort(order), slice(None)))
    return e
