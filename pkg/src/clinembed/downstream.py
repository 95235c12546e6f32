"""Supervised fine-tuning over whole stays.

Each time step is turned into one m-vector (a linear projection of the raw
features, or max-pooled feature embeddings), a causal transformer runs over the
time axis, and a linear layer gives two-class logits per step or per stay.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward, named_grads
from .checkpoint import Checkpoint
from .data import MORTALITY_WINDOW, Dataset
from .encoder import EncoderConfig, encode, init_encoder
from .errors import ConfigError, DataError, IoError, MetricError, NumericError, SchemaError
from .metrics import auprc, auroc
from .optim import Adam
from .tokenizer import TokenizerParams, init_tokenizer, tokenize

log = logging.getLogger(__name__)

MODELS = ("transformer", "ftt", "cbow", "mlm")
TASKS = ("per_step", "stay_level")
REPLICATION_FRACTIONS = (1.0, 0.5, 0.1, 0.01)


@dataclass
class DownstreamConfig:
    model: str = "ftt"
    task: str = "per_step"
    pooling: str = "max"
    batch_size: int = 16
    lr: float = 1e-4
    dim: int = 128
    depth: int = 1
    heads: int = 1
    label_fraction: float = 1.0
    freeze_tokenizer: bool = False
    max_epochs: int = 30
    patience: int = 5
    max_seq: int = 64
    eval_batch: int = 64

    def validate(self):
        if self.model not in MODELS:
            raise ConfigError(f"unknown model {self.model!r}; expected one of {MODELS}")
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.pooling != "max":
            raise ConfigError("only max pooling is supported")
        if not 0 < self.label_fraction <= 1:
            raise ConfigError("label_fraction must lie in (0, 1]")
        if self.batch_size < 1 or self.patience < 1 or self.max_epochs < 0:
            raise ConfigError("batch_size and patience must be >= 1, max_epochs >= 0")
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")
        self.time_config().validate()

    def time_config(self, dim=None):
        return EncoderConfig(depth=self.depth, heads=self.heads, dim=dim or self.dim,
                             max_seq=self.max_seq, positional=True)

    def to_dict(self):
        return asdict(self)


@dataclass
class StayBatch:
    values: np.ndarray      # B x T x d, zero in padding
    lengths: np.ndarray     # B
    step_labels: np.ndarray  # B x T, zero in padding
    stay_labels: np.ndarray  # B

    @property
    def valid(self):
        T = self.values.shape[1]
        return np.arange(T)[None, :] < self.lengths[:, None]


def make_batch(stays, task: str, d: int) -> StayBatch:
    if not stays:
        raise DataError("empty batch")
    horizon = MORTALITY_WINDOW if task == "stay_level" else None
    lengths = np.array([s.T if horizon is None else min(s.T, horizon) for s in stays])
    if np.any(lengths < 1):
        raise DataError("stays must have at least one step")
    B, T = len(stays), int(lengths.max())
    values = np.zeros((B, T, d))
    steps = np.zeros((B, T), dtype=np.int64)
    stay_y = np.zeros(B, dtype=np.int64)
    for i, (s, n) in enumerate(zip(stays, lengths)):
        values[i, :n] = s.values[:n]
        if s.per_step_labels is not None:
            steps[i, :n] = s.per_step_labels[:n]
        if s.stay_label is not None:
            stay_y[i] = s.stay_label
    return StayBatch(values, lengths, steps, stay_y)


def position_weights(lengths, T) -> np.ndarray:
    """1 for real steps and 0 for padding."""
    return (np.arange(T)[None, :] < np.asarray(lengths)[:, None]).astype(np.float64)


def pool_step(e: Tensor) -> Tensor:
    """Coordinate-wise max over the feature axis: ``(..., d, m) -> (..., m)``."""
    if e.ndim < 2 or e.shape[-2] < 1:
        raise ConfigError("pool_step needs at least one feature embedding")
    return ad.max(e, axis=-2)


class DownstreamModel:
    """Front end, time-axis encoder and output layer for one model variant."""

    def __init__(self, config: DownstreamConfig, schema, tok: TokenizerParams | None,
                 feature_params: dict, feature_config: EncoderConfig | None,
                 time_params: dict, head: dict, projection: dict):
        self.config = config
        self.schema = schema
        self.tok = tok
        self.feature_params = feature_params
        self.feature_config = feature_config
        self.time_params = time_params
        self.head = head
        self.projection = projection
        self.dim = tok.m if tok is not None else config.dim
        self.time_config = config.time_config(self.dim)

    @classmethod
    def init(cls, config: DownstreamConfig, schema, seed: int, pretrained: Checkpoint | None = None):
        config.validate()
        if config.model in ("cbow", "mlm") and pretrained is None:
            raise ConfigError(f"model {config.model!r} needs a pretrained checkpoint")
        if config.model == "transformer" and pretrained is not None:
            raise ConfigError("the raw transformer does not use a pretrained tokenizer")
        tok, feature_params, feature_config, projection = None, {}, None, {}
        if pretrained is not None:
            pretrained.check_schema(schema.structure_hash())
            tok = TokenizerParams.from_arrays(schema, pretrained.arrays)
            if config.model == "mlm":
                if pretrained.model_kind != "mlm":
                    raise SchemaError("the mlm variant needs an MLM checkpoint with a feature encoder")
                pre = pretrained.config["pretrain"]
                feature_config = EncoderConfig(depth=pre["depth"], heads=pre["heads"], dim=pre["dim"],
                                               max_seq=schema.d)
                feature_params = {k: Tensor(v, requires_grad=True)
                                  for k, v in pretrained.subset("encoder.").items()}
        elif config.model != "transformer":
            tok = init_tokenizer(schema, config.dim, seed)
        m = tok.m if tok is not None else config.dim
        if config.model == "transformer":
            rng = np.random.default_rng([seed, 23])
            bound = 1.0 / math.sqrt(schema.d)
            projection = {
                "input.W": Tensor(rng.uniform(-bound, bound, size=(schema.d, m)), requires_grad=True),
                "input.b": Tensor(np.zeros(m), requires_grad=True),
            }
        time_params = init_encoder(config.time_config(m), np.random.default_rng([seed, 21]), prefix="time.")
        rng = np.random.default_rng([seed, 22])
        bound = 1.0 / math.sqrt(m)
        head = {"out.W": Tensor(rng.uniform(-bound, bound, size=(m, 2)), requires_grad=True),
                "out.b": Tensor(np.zeros(2), requires_grad=True)}
        model = cls(config, schema, tok, feature_params, feature_config, time_params, head, projection)
        if config.freeze_tokenizer:
            model.freeze_front_end()
        return model

    def freeze_front_end(self):
        if self.tok is not None:
            self.tok.set_trainable(False)
        for t in self.feature_params.values():
            t.requires_grad = False

    def params(self) -> dict:
        out = {}
        if self.tok is not None:
            out.update(self.tok.params())
        out.update(self.feature_params)
        out.update(self.projection)
        out.update(self.time_params)
        out.update(self.head)
        return out

    def trainable(self) -> dict:
        return {k: t for k, t in self.params().items() if t.requires_grad}

    def step_embeddings(self, values: np.ndarray) -> Tensor:
        """``(B, T, d)`` feature vectors to ``(B, T, m)`` step embeddings."""
        if self.config.model == "transformer":
            return ad.add(ad.matmul(Tensor(values), self.projection["input.W"]), self.projection["input.b"])
        e = tokenize(values, self.tok)
        if self.config.model == "mlm":
            B, T, d, m = e.shape
            f = encode(ad.reshape(e, (B * T, d, m)), self.feature_params, self.feature_config,
                       causal=False, prefix="encoder.")
            e = ad.reshape(f, (B, T, d, m))
        return pool_step(e)

    def logits(self, batch: StayBatch) -> Tensor:
        """``(B, T, 2)`` for per-step tasks, ``(B, 2)`` at the last counted step otherwise."""
        if batch.values.shape[1] > self.time_config.max_seq:
            raise ConfigError(f"stay length {batch.values.shape[1]} exceeds max_seq {self.time_config.max_seq}")
        g = self.step_embeddings(batch.values)
        h = encode(g, self.time_params, self.time_config, causal=True, key_valid=batch.valid, prefix="time.")
        if self.config.task == "stay_level":
            h = ad.index(h, (np.arange(len(batch.lengths)), batch.lengths - 1))
        return ad.add(ad.matmul(h, self.head["out.W"]), self.head["out.b"])

    def snapshot(self) -> dict:
        return {k: t.data.copy() for k, t in self.params().items()}

    def restore(self, snap: dict):
        for k, t in self.params().items():
            t.data = snap[k].copy()

    def to_checkpoint(self, seed: int, metadata: dict) -> Checkpoint:
        arrays = {}
        if self.tok is not None:
            arrays.update(self.tok.to_arrays())
        for group in (self.feature_params, self.projection, self.time_params, self.head):
            arrays.update({k: t.data for k, t in group.items()})
        config = {"downstream": replace(self.config, dim=self.dim).to_dict()}
        if self.feature_config is not None:
            config["feature_encoder"] = self.feature_config.to_dict()
        return Checkpoint(model_kind="downstream", schema_hash=self.schema.structure_hash(),
                          schema=self.schema.to_dict(), config=config, arrays=arrays,
                          seed=seed, metadata=metadata)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, schema):
        if ckpt.model_kind != "downstream":
            raise SchemaError(f"expected a downstream checkpoint, got {ckpt.model_kind!r}")
        ckpt.check_schema(schema.structure_hash())
        config = DownstreamConfig(**ckpt.config["downstream"])
        mk = lambda prefix: {k: Tensor(v, requires_grad=True) for k, v in ckpt.subset(prefix).items()}  # noqa: E731
        tok = TokenizerParams.from_arrays(schema, ckpt.arrays) if config.model != "transformer" else None
        fcfg = ckpt.config.get("feature_encoder")
        return cls(config, schema, tok, mk("encoder."), EncoderConfig(**fcfg) if fcfg else None,
                   mk("time."), mk("out."), mk("input."))


def forward_stay(values, model: DownstreamModel) -> Tensor:
    """Logits for a single stay given as a ``(T, d)`` array."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] == 0:
        raise DataError("a stay needs at least one time step")
    if model.config.task == "stay_level":
        values = values[:MORTALITY_WINDOW]
    batch = StayBatch(values[None], np.array([values.shape[0]]),
                      np.zeros((1, values.shape[0]), dtype=np.int64), np.zeros(1, dtype=np.int64))
    out = model.logits(batch)
    return ad.index(out, 0)


def class_weights(labels) -> np.ndarray:
    """Inverse-prevalence weights ``n / (2 n_c)``; a missing class gets weight 1."""
    y = np.asarray(labels).reshape(-1)
    n = y.size
    w = np.ones(2)
    for c in (0, 1):
        nc = int(np.sum(y == c))
        if nc:
            w[c] = n / (2.0 * nc)
    return w


def weighted_ce(logits: Tensor, batch: StayBatch, task: str, weights) -> Tensor:
    """Class-weighted cross-entropy averaged over real (unpadded) positions."""
    lp = ad.log_softmax(logits, axis=-1)
    if task == "per_step":
        b, t = np.nonzero(batch.valid)
        y = batch.step_labels[b, t]
        picked = ad.index(lp, (b, t, y))
    else:
        y = batch.stay_labels
        picked = ad.index(lp, (np.arange(len(y)), y))
    w = Tensor(-np.asarray(weights)[y] / len(y))
    return ad.sum(ad.mul(picked, w))


def predict(model: DownstreamModel, ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Positive-class probabilities and labels over all scored positions of ``ds``."""
    scores, labels = [], []
    task, d = model.config.task, model.schema.d
    for start in range(0, len(ds), model.config.eval_batch):
        batch = make_batch(ds.stays[start:start + model.config.eval_batch], task, d)
        z = model.logits(batch).data
        p = 1.0 / (1.0 + np.exp(z[..., 0] - z[..., 1]))
        if task == "per_step":
            mask = batch.valid
            scores.append(p[mask])
            labels.append(batch.step_labels[mask])
        else:
            scores.append(p)
            labels.append(batch.stay_labels)
    return np.concatenate(scores), np.concatenate(labels)


def evaluate(model: DownstreamModel, ds: Dataset) -> dict:
    s, y = predict(model, ds)
    try:
        return {"auprc": auprc(s, y), "auroc": auroc(s, y)}
    except MetricError as exc:
        raise DataError(f"cannot score split: {exc}") from None


def subsample_labels(train: Dataset, fraction: float, seed: int) -> Dataset:
    """Keep ``floor(fraction * N)`` whole stays chosen by a seeded shuffle."""
    if not 0 < fraction <= 1:
        raise ConfigError("label fraction must lie in (0, 1]")
    if fraction == 1.0:
        return train
    n = math.floor(fraction * len(train))
    if n == 0:
        raise DataError(f"label fraction {fraction} leaves no training stays")
    keep = np.sort(np.random.default_rng([seed, 25]).permutation(len(train))[:n])
    return train.subset([train.stays[i] for i in keep])


def _labels(ds: Dataset, task: str):
    if task == "per_step":
        return ds.step_labels()
    return np.array([s.stay_label for s in ds.stays])


@dataclass
class FinetuneResult:
    model: DownstreamModel
    history: list
    best_epoch: int
    metrics: dict
    checkpoint: Checkpoint


def finetune(train: Dataset, val: Dataset, test: Dataset, config: DownstreamConfig,
             pretrained: Checkpoint | None = None, seed: int = 0, progress=None) -> FinetuneResult:
    """Train with Adam and early stopping on validation AUPRC; report test AUPRC/AUROC."""
    config.validate()
    for part in (train, val, test):
        if not part.normalized:
            raise DataError("fine-tuning expects imputed, normalized splits")
    train = subsample_labels(train, config.label_fraction, seed)
    model = DownstreamModel.init(config, train.schema, seed, pretrained)
    params = model.trainable()
    opt = Adam(params, lr=config.lr)
    weights = class_weights(_labels(train, config.task))
    d = train.schema.d

    history = []

    def record(epoch, loss):
        row = {"epoch": epoch, "train_loss": loss, **{f"val_{k}": v for k, v in evaluate(model, val).items()}}
        history.append(row)
        if progress:
            progress(row)
        return row["val_auprc"]

    best = record(0, float("nan"))
    best_epoch, best_snap, stale, step = 0, model.snapshot(), 0, 0
    n = len(train)
    for epoch in range(1, config.max_epochs + 1):
        order = np.random.default_rng([seed, 24, epoch]).permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, config.batch_size):
            batch = make_batch([train.stays[i] for i in order[start:start + config.batch_size]], config.task, d)
            try:
                with Tape() as tape:
                    loss = weighted_ce(model.logits(batch), batch, config.task, weights)
                grads = backward(tape, loss)
            except NumericError as exc:
                raise NumericError(f"fine-tuning diverged: {exc}", step=step) from None
            opt.step(named_grads(params, grads))
            step += 1
            total += loss.item()
            count += 1
        score = record(epoch, total / count)
        if score > best:
            best, best_epoch, best_snap, stale = score, epoch, model.snapshot(), 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    model.restore(best_snap)
    test_scores = evaluate(model, test)
    metrics = {"model": config.model, "task": config.task, "label_fraction": config.label_fraction,
               "seed": seed, "auprc": test_scores["auprc"], "auroc": test_scores["auroc"],
               "best_val_auprc": best, "best_epoch": best_epoch}
    meta = {"epochs_run": history[-1]["epoch"], "best_epoch": best_epoch, "best_val_auprc": best,
            "test_auprc": test_scores["auprc"], "test_auroc": test_scores["auroc"],
            "train_stays": n, "train_steps": step}
    return FinetuneResult(model, history, best_epoch, metrics, model.to_checkpoint(seed, meta))


METRIC_COLUMNS = ("model", "task", "label_fraction", "seed", "auprc", "auroc")


def write_metrics(rows, path):
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(METRIC_COLUMNS)
            for r in rows:
                w.writerow([r["model"], r["task"], repr(float(r["label_fraction"])), r["seed"],
                            repr(float(r["auprc"])), repr(float(r["auroc"]))])
    except OSError as exc:
        raise IoError(f"cannot write metrics {path}: {exc}") from None


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["label_fraction"] = float(r["label_fraction"])
        r["seed"] = int(r["seed"])
        r["auprc"] = float(r["auprc"])
        r["auroc"] = float(r["auroc"])
    return rows
