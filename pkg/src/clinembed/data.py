"""Stay records, preprocessing, CSV I/O and the synthetic EHR generator."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import ConfigError, DataError, SchemaError
from .tokenizer import CATEGORICAL, NUMERICAL, FeatureSchema, default_schema

STAY_COL = "stay_id"
STEP_COL = "step_index"
LABEL_COL = "label"
STAY_LABEL_COL = "stay_label"
MORTALITY_WINDOW = 48


@dataclass
class StayRecord:
    stay_id: str
    values: np.ndarray
    missing_mask: np.ndarray
    per_step_labels: np.ndarray | None = None
    stay_label: int | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.missing_mask = np.asarray(self.missing_mask, dtype=bool)
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise DataError(f"stay {self.stay_id}: values must be T x d with T >= 1")
        if self.missing_mask.shape != self.values.shape:
            raise DataError(f"stay {self.stay_id}: mask shape mismatch")
        if self.per_step_labels is not None:
            self.per_step_labels = np.asarray(self.per_step_labels, dtype=np.int64)
            if self.per_step_labels.shape != (self.T,):
                raise DataError(f"stay {self.stay_id}: per-step labels must have length T")

    @property
    def T(self):
        return self.values.shape[0]


@dataclass
class Dataset:
    schema: FeatureSchema
    stays: list
    imputed: bool = False
    normalized: bool = False

    def __len__(self):
        return len(self.stays)

    def subset(self, stays):
        return replace(self, stays=list(stays))

    @property
    def n_steps(self):
        return int(sum(s.T for s in self.stays))

    def step_labels(self):
        return np.concatenate([s.per_step_labels for s in self.stays if s.per_step_labels is not None])


def _hash_unit(seed, stay_id):
    h = hashlib.sha256(f"{seed}:{stay_id}".encode()).digest()
    return int.from_bytes(h[:8], "big") / 2.0**64


def split_dataset(ds: Dataset, seed: int = 0, fractions=(0.7, 0.15, 0.15)):
    """Assign each stay to train/val/test from a seeded hash of its id."""
    if not math.isclose(sum(fractions), 1.0) or min(fractions) < 0:
        raise ConfigError(f"split fractions must be non-negative and sum to 1: {fractions}")
    cut1, cut2 = fractions[0], fractions[0] + fractions[1]
    parts = ([], [], [])
    for s in ds.stays:
        u = _hash_unit(seed, s.stay_id)
        parts[0 if u < cut1 else 1 if u < cut2 else 2].append(s)
    return tuple(ds.subset(p) for p in parts)


def fit_stats(train: Dataset) -> FeatureSchema:
    """Schema with mean/std (population) and mode computed from observed training cells."""
    if train.normalized or train.imputed:
        raise DataError("statistics must be fitted on raw (unimputed, unnormalized) training data")
    schema = train.schema
    X = np.concatenate([s.values for s in train.stays])
    M = np.concatenate([s.missing_mask for s in train.stays])
    stats = {}
    for i, f in enumerate(schema.features):
        col = X[~M[:, i], i]
        if col.size == 0:
            raise SchemaError(f"feature {f.name} is entirely missing in the training split")
        if f.kind == NUMERICAL:
            stats[f.name] = {"mean": float(col.mean()), "std": float(col.std())}
        else:
            counts = np.bincount(col.astype(np.int64), minlength=f.cardinality)
            stats[f.name] = {"mode": int(np.argmax(counts))}
    return schema.with_stats(stats)


def impute(ds: Dataset, schema: FeatureSchema) -> Dataset:
    """Fill missing numerical cells with the training mean, categorical with the mode."""
    if not schema.has_stats:
        raise SchemaError("impute needs a schema with fitted statistics")
    if ds.normalized:
        raise DataError("impute before normalize")
    fill = np.array([f.mean if f.kind == NUMERICAL else f.mode for f in schema.features], dtype=np.float64)
    stays = []
    for s in ds.stays:
        v = np.where(s.missing_mask, fill, s.values)
        stays.append(replace(s, values=v))
    return replace(ds, schema=schema, stays=stays, imputed=True)


def normalize(ds: Dataset, schema: FeatureSchema) -> Dataset:
    if ds.normalized:
        raise DataError("dataset is already normalized")
    if not schema.has_stats:
        raise SchemaError("normalize needs a schema with fitted statistics")
    idx = schema.numerical_idx
    mean = np.array([schema.features[i].mean for i in idx])
    std = np.array([schema.features[i].std for i in idx])
    if np.any(std == 0):
        raise SchemaError("zero standard deviation in a numerical feature")
    stays = []
    for s in ds.stays:
        v = s.values.copy()
        v[:, idx] = (v[:, idx] - mean) / std
        stays.append(replace(s, values=v))
    return replace(ds, schema=schema, stays=stays, normalized=True)


@dataclass
class Prepared:
    schema: FeatureSchema
    train: Dataset
    val: Dataset
    test: Dataset


def prepare(ds: Dataset, split_seed: int = 0, fractions=(0.7, 0.15, 0.15)) -> Prepared:
    """Split, fit stats on train only, impute and normalize every split."""
    train, val, test = split_dataset(ds, split_seed, fractions)
    if len(train) == 0:
        raise DataError("training split is empty")
    schema = fit_stats(train)
    out = [normalize(impute(part, schema), schema) for part in (train, val, test)]
    return Prepared(schema, *out)


def default_max_missing(d: int) -> int:
    # 15 of 18 features, scaled to the schema size
    return (15 * d) // 18


@dataclass
class StepPool:
    """Time steps used as independent self-supervised samples."""

    values: np.ndarray
    prev_values: np.ndarray
    stay_index: np.ndarray
    step_index: np.ndarray

    def __len__(self):
        return self.values.shape[0]

    def take(self, idx):
        return StepPool(self.values[idx], self.prev_values[idx], self.stay_index[idx], self.step_index[idx])


def filter_steps(ds: Dataset, max_missing: int | None = None) -> StepPool:
    """Pool of steps with at most ``max_missing`` missing features (pre-imputation)."""
    if max_missing is None:
        max_missing = default_max_missing(ds.schema.d)
    vals, prevs, sidx, tidx = [], [], [], []
    for si, s in enumerate(ds.stays):
        keep = s.missing_mask.sum(axis=1) <= max_missing
        prev = np.concatenate([s.values[:1], s.values[:-1]])
        vals.append(s.values[keep])
        prevs.append(prev[keep])
        sidx.append(np.full(int(keep.sum()), si))
        tidx.append(np.nonzero(keep)[0])
    d = ds.schema.d
    if not vals:
        return StepPool(np.zeros((0, d)), np.zeros((0, d)), np.zeros(0, int), np.zeros(0, int))
    return StepPool(np.concatenate(vals), np.concatenate(prevs),
                    np.concatenate(sidx).astype(int), np.concatenate(tidx).astype(int))


# --- CSV -------------------------------------------------------------------


def _fmt(v, kind):
    if math.isnan(v):
        return ""
    return str(int(v)) if kind == CATEGORICAL else repr(float(v))


def write_csv(ds: Dataset, path):
    schema = ds.schema
    kinds = [f.kind for f in schema.features]
    has_step = any(s.per_step_labels is not None for s in ds.stays)
    has_stay = any(s.stay_label is not None for s in ds.stays)
    header = [STAY_COL, STEP_COL] + schema.names
    header += [LABEL_COL] if has_step else []
    header += [STAY_LABEL_COL] if has_stay else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for s in ds.stays:
            for t in range(s.T):
                row = [s.stay_id, str(t)]
                row += ["" if s.missing_mask[t, i] else _fmt(s.values[t, i], kinds[i]) for i in range(schema.d)]
                if has_step:
                    row.append("" if s.per_step_labels is None else str(int(s.per_step_labels[t])))
                if has_stay:
                    row.append("" if s.stay_label is None else str(int(s.stay_label)))
                w.writerow(row)


def load_csv(path, schema: FeatureSchema) -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path} is empty") from None
        allowed = {STAY_COL, STEP_COL, LABEL_COL, STAY_LABEL_COL, *schema.names}
        unknown = [c for c in header if c not in allowed]
        if unknown:
            raise SchemaError(f"unknown columns {unknown}")
        missing = [c for c in [STAY_COL, STEP_COL, *schema.names] if c not in header]
        if missing:
            raise SchemaError(f"missing columns {missing}")
        pos = {c: i for i, c in enumerate(header)}
        feat_pos = [pos[n] for n in schema.names]
        rows: dict[str, list] = {}
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(f"line {line_no}: expected {len(header)} cells")
            rows.setdefault(row[pos[STAY_COL]], []).append(row)
    stays = []
    for sid in sorted(rows):
        group = rows[sid]
        try:
            group.sort(key=lambda r: int(r[pos[STEP_COL]]))
            steps = [int(r[pos[STEP_COL]]) for r in group]
        except ValueError:
            raise DataError(f"stay {sid}: non-integer step_index") from None
        if steps != list(range(len(steps))):
            raise DataError(f"stay {sid}: step_index must be contiguous from 0")
        cells = [[r[p] for p in feat_pos] for r in group]
        mask = np.array([[c == "" for c in row] for row in cells])
        try:
            vals = np.array([[float(c) if c != "" else np.nan for c in row] for row in cells])
        except ValueError as exc:
            raise DataError(f"stay {sid}: {exc}") from None
        labels = None
        if LABEL_COL in pos and all(r[pos[LABEL_COL]] != "" for r in group):
            labels = np.array([int(r[pos[LABEL_COL]]) for r in group])
        stay_label = None
        if STAY_LABEL_COL in pos and group[0][pos[STAY_LABEL_COL]] != "":
            stay_label = int(group[0][pos[STAY_LABEL_COL]])
        stays.append(StayRecord(sid, vals, mask, labels, stay_label))
    return Dataset(schema, stays)


# --- synthetic generator ---------------------------------------------------

# (center, scale) converting latent z-values to clinical units
UNITS = {
    "DBP": (65.0, 10.0), "FIO": (0.40, 0.10), "HR": (85.0, 15.0), "MBP": (82.0, 12.0),
    "OS": (96.0, 2.5), "RR": (18.0, 4.0), "SBP": (120.0, 18.0), "Temp": (37.0, 0.6),
}


def _default_factors():
    return [
        {"name": "thermo", "loadings": {"Temp": 1.0, "RR": 1.0, "HR": 1.0}},
        {"name": "pressure", "loadings": {"SBP": 1.0, "DBP": 1.0, "MBP": 1.0}},
        {"name": "oxygenation", "loadings": {"OS": -1.0, "FIO": 1.0}},
        {"name": "consciousness", "loadings": {}},
    ]


# Ordinal cutpoints on the consciousness factor; code 0 is the worst response.
GCS_CUTS = {
    "GCSEO": [-1.6, -1.0, -0.4],
    "GCSVR": [-1.8, -1.2, -0.7, -0.2],
    "GCSMR": [-2.2, -1.7, -1.2, -0.8, -0.3],
}


def _default_label_weights():
    return {"HR": 0.6, "RR": 0.6, "Temp": 0.3, "SBP": -0.4, "MBP": -0.3, "OS": -0.5, "FIO": 0.4}


def _default_label_quadratic():
    return {"Temp": 0.3, "HR": 0.3}


def _default_code_effects():
    return {"CRR": [0.0, 0.8], "GCST": [1.2, 1.2, 1.1, 1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.1, 0.0]}


@dataclass
class GeneratorSpec:
    n_stays: int = 2000
    t_min: int = 12
    t_max: int = 36
    factors: list = field(default_factory=_default_factors)
    noise: float = 0.7
    ar_rho: float = 0.8
    consciousness_factor: str = "consciousness"
    crr_factor: str = "pressure"
    crr_threshold: float = -1.0
    categorical_noise: float = 0.3
    label_weights: dict = field(default_factory=_default_label_weights)
    label_quadratic: dict = field(default_factory=_default_label_quadratic)
    label_code_effects: dict = field(default_factory=_default_code_effects)
    prevalence: float = 0.10
    missing_rate: float = 0.05
    seed: int = 0

    def validate(self):
        if self.n_stays < 1:
            raise ConfigError("n_stays must be >= 1")
        if not 1 <= self.t_min <= self.t_max:
            raise ConfigError("need 1 <= t_min <= t_max")
        if not 0 < self.prevalence < 0.5:
            raise ConfigError("prevalence must lie in (0, 0.5)")
        if not 0 <= self.missing_rate < 1:
            raise ConfigError("missing_rate must lie in [0, 1)")
        if self.noise < 0 or self.categorical_noise < 0:
            raise ConfigError("noise scales must be non-negative")
        if not -1 < self.ar_rho < 1:
            raise ConfigError("ar_rho must lie in (-1, 1)")
        names = [f["name"] for f in self.factors]
        for ref in (self.consciousness_factor, self.crr_factor):
            if ref not in names:
                raise ConfigError(f"unknown factor {ref!r}")
        known = set(UNITS)
        for f in self.factors:
            bad = set(f.get("loadings", {})) - known
            if bad:
                raise ConfigError(f"factor {f['name']} loads unknown features {sorted(bad)}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, doc):
        allowed = set(cls.__dataclass_fields__)
        unknown = set(doc) - allowed
        if unknown:
            raise ConfigError(f"unknown generator keys {sorted(unknown)}")
        return cls(**doc)


def _ar1(rng, T, k, rho):
    f = np.empty((T, k))
    f[0] = rng.standard_normal(k)
    innov = rng.standard_normal((T, k)) * math.sqrt(1 - rho * rho)
    for t in range(1, T):
        f[t] = rho * f[t - 1] + innov[t]
    return f


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _solve_intercept(base, target, iters=100):
    lo, hi = -60.0, 60.0
    if not _sigmoid(base + lo).mean() < target < _sigmoid(base + hi).mean():
        raise ConfigError(f"prevalence {target} unreachable")
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if _sigmoid(base + mid).mean() < target:
            lo = mid
        else:
            hi = mid
    b0 = 0.5 * (lo + hi)
    if abs(_sigmoid(base + b0).mean() - target) > 1e-6:
        raise ConfigError(f"prevalence {target} unreachable after {iters} bisection steps")
    return b0


def generate_synthetic(spec: GeneratorSpec | None = None, schema: FeatureSchema | None = None) -> Dataset:
    """Stays whose vitals share latent factors, in clinical units, with labels and missingness."""
    spec = spec or GeneratorSpec()
    spec.validate()
    schema = schema or default_schema()
    if set(schema.numerical_names()) != set(UNITS) or \
            set(schema.categorical_names()) != {"CRR", "GCST", "GCSEO", "GCSMR", "GCSVR"}:
        raise SchemaError("the generator produces the default 13-feature schema only")
    rng = np.random.default_rng(spec.seed)
    fnames = [f["name"] for f in spec.factors]
    k = len(fnames)
    num_names = schema.numerical_names()
    load = np.zeros((k, len(num_names)))
    for fi, f in enumerate(spec.factors):
        for name, w in f.get("loadings", {}).items():
            load[fi, num_names.index(name)] = w
    ci = fnames.index(spec.consciousness_factor)
    pi = fnames.index(spec.crr_factor)

    lengths = rng.integers(spec.t_min, spec.t_max + 1, size=spec.n_stays)
    latent_z, codes = [], []
    for T in lengths:
        f = _ar1(rng, int(T), k, spec.ar_rho)
        z = f @ load + spec.noise * rng.standard_normal((int(T), len(num_names)))
        c = {}
        for name, cuts in GCS_CUTS.items():
            level = f[:, ci] + spec.categorical_noise * rng.standard_normal(int(T))
            c[name] = np.searchsorted(np.asarray(cuts), level)
        c["GCST"] = c["GCSEO"] + c["GCSVR"] + c["GCSMR"]
        crr = f[:, pi] + spec.categorical_noise * rng.standard_normal(int(T))
        c["CRR"] = (crr < spec.crr_threshold).astype(int)
        latent_z.append(z)
        codes.append(c)

    # label logits without intercept
    wvec = np.array([spec.label_weights.get(n, 0.0) for n in num_names])
    qvec = np.array([spec.label_quadratic.get(n, 0.0) for n in num_names])
    base = []
    for z, c in zip(latent_z, codes):
        s = z @ wvec + (z * z) @ qvec
        for name, eff in spec.label_code_effects.items():
            s = s + np.asarray(eff)[c[name]]
        base.append(s)
    b0 = _solve_intercept(np.concatenate(base), spec.prevalence)

    stays = []
    width = len(str(spec.n_stays))
    for n, (z, c, s) in enumerate(zip(latent_z, codes, base)):
        T = z.shape[0]
        y = (rng.uniform(size=T) < _sigmoid(s + b0)).astype(np.int64)
        vals = np.empty((T, schema.d))
        for j, name in enumerate(num_names):
            center, sc = UNITS[name]
            vals[:, schema.index(name)] = center + sc * z[:, j]
        for name in schema.categorical_names():
            vals[:, schema.index(name)] = c[name]
        mask = rng.uniform(size=vals.shape) < spec.missing_rate
        vals[mask] = np.nan
        stay_label = int(y[:MORTALITY_WINDOW].any())
        stays.append(StayRecord(f"s{n:0{width}d}", vals, mask, y, stay_label))
    return Dataset(schema, stays)


def manifest(ds: Dataset) -> dict:
    steps = ds.n_steps
    labels = ds.step_labels() if any(s.per_step_labels is not None for s in ds.stays) else None
    stay_labels = [s.stay_label for s in ds.stays if s.stay_label is not None]
    missing = float(sum(s.missing_mask.sum() for s in ds.stays)) / max(1, steps * ds.schema.d)
    return {
        "n_stays": len(ds),
        "n_steps": steps,
        "n_features": ds.schema.d,
        "n_numerical": ds.schema.n_numerical,
        "n_categorical": ds.schema.n_categorical,
        "features": ds.schema.names,
        "per_step_prevalence": None if labels is None else float(labels.mean()),
        "stay_prevalence": float(np.mean(stay_labels)) if stay_labels else None,
        "missing_fraction": missing,
        "schema_hash": ds.schema.structure_hash(),
    }


def write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
