"""CBOW and MLM objectives over the features of a single time step."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward, named_grads
from .checkpoint import Checkpoint
from .data import Dataset, StepPool, filter_steps, split_dataset
from .encoder import EncoderConfig, encode, init_encoder
from .errors import ConfigError, DataError, NumericError, SchemaError
from .optim import Adam
from .tokenizer import FeatureSchema, TokenizerParams, init_tokenizer, tokenize

log = logging.getLogger(__name__)

OBJECTIVES = ("cbow", "mlm")
MASK, RANDOM, KEEP = 0, 1, 2


@dataclass
class TargetPick:
    """Schema indices of the held-out numerical (``j``) and categorical (``k``) features."""

    j: np.ndarray
    k: np.ndarray


def pick_targets(rng: np.random.Generator, schema: FeatureSchema, n: int | None = None) -> TargetPick:
    if schema.n_numerical == 0 or schema.n_categorical == 0:
        raise SchemaError("need at least one numerical and one categorical feature")
    size = 1 if n is None else n
    j = schema.numerical_idx[rng.integers(0, schema.n_numerical, size=size)]
    k = schema.categorical_idx[rng.integers(0, schema.n_categorical, size=size)]
    if n is None:
        return TargetPick(int(j[0]), int(k[0]))
    return TargetPick(j, k)


# --- heads -------------------------------------------------------------------


def init_heads(schema: FeatureSchema, m: int, rng: np.random.Generator) -> dict:
    """Numerical head with one output per numerical feature and a categorical head
    with one output slice per categorical feature; both read an m-vector."""
    b = 1.0 / math.sqrt(m)
    return {
        "head.num_W": Tensor(rng.uniform(-b, b, size=(m, schema.n_numerical)), requires_grad=True),
        "head.num_b": Tensor(np.zeros(schema.n_numerical), requires_grad=True),
        "head.cat_W": Tensor(rng.uniform(-b, b, size=(m, schema.total_categories)), requires_grad=True),
        "head.cat_b": Tensor(np.zeros(schema.total_categories), requires_grad=True),
    }


def _num_slot(schema, j):
    return np.searchsorted(schema.numerical_idx, j)


def _cat_slot(schema, k):
    return np.searchsorted(schema.categorical_idx, k)


def numerical_loss(h_j: Tensor, x: np.ndarray, j: np.ndarray, heads: dict, schema) -> Tensor:
    """MSE between the head output for feature ``j`` and its true value."""
    B = h_j.shape[0]
    rows = np.arange(B)
    out = ad.add(ad.matmul(h_j, heads["head.num_W"]), heads["head.num_b"])
    pred = ad.index(out, (rows, _num_slot(schema, j)))
    resid = ad.add(pred, Tensor(-x[rows, j]))
    return ad.mean(ad.mul(resid, resid))


def categorical_loss(h_k: Tensor, x: np.ndarray, k: np.ndarray, heads: dict, schema) -> Tensor:
    """Cross-entropy over the classes of feature ``k`` only."""
    B = h_k.shape[0]
    rows = np.arange(B)
    slot = _cat_slot(schema, k)
    offs = schema.cat_offsets[slot]
    card = np.asarray(schema.cardinalities)[slot]
    cols = np.arange(schema.total_categories)
    allowed = (cols >= offs[:, None]) & (cols < (offs + card)[:, None])
    logits = ad.add(ad.matmul(h_k, heads["head.cat_W"]), heads["head.cat_b"])
    logp = ad.log_softmax(logits, axis=-1, mask=allowed)
    target = offs + x[rows, k].astype(np.int64)
    return ad.scale(ad.mean(ad.index(logp, (rows, target))), -1.0)


# --- CBOW ----------------------------------------------------------------------


def _exclusion_mask(B, d, cols):
    mask = np.ones((B, d, 1))
    mask[np.arange(B), cols, 0] = 0.0
    return Tensor(mask)


def cbow_context(x, pick: TargetPick, tok: TokenizerParams, use_previous=False, prev=None):
    """(e_sum excluding j, e_sum excluding k), each of shape (B, m)."""
    x = np.atleast_2d(x)
    B, d = x.shape
    e = tokenize(x, tok)
    j, k = np.atleast_1d(pick.j), np.atleast_1d(pick.k)
    sum_j = ad.sum(ad.mul(e, _exclusion_mask(B, d, j)), axis=1)
    sum_k = ad.sum(ad.mul(e, _exclusion_mask(B, d, k)), axis=1)
    if use_previous:
        if prev is None:
            raise ConfigError("use_previous needs the previous time step")
        prev_sum = ad.sum(tokenize(np.atleast_2d(prev), tok), axis=1)
        sum_j = ad.add(sum_j, prev_sum)
        sum_k = ad.add(sum_k, prev_sum)
    return sum_j, sum_k


def cbow_forward(x, pick: TargetPick, tok: TokenizerParams, heads: dict,
                 use_previous=False, prev=None):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    sum_j, sum_k = cbow_context(x, pick, tok, use_previous, prev)
    j, k = np.atleast_1d(pick.j), np.atleast_1d(pick.k)
    return (numerical_loss(sum_j, x, j, heads, tok.schema),
            categorical_loss(sum_k, x, k, heads, tok.schema))


# --- MLM -----------------------------------------------------------------------


def draw_corruption(rng: np.random.Generator, n: int, m: int):
    """Branch per target slot (n x 2: MASK/RANDOM/KEEP) and the random vectors."""
    u = rng.uniform(size=(n, 2))
    branch = np.where(u < 0.8, MASK, np.where(u < 0.9, RANDOM, KEEP))
    rand = rng.standard_normal((n, 2, m)) / math.sqrt(m)
    return branch, rand


def mlm_corrupt(e: Tensor, pick: TargetPick, rng: np.random.Generator, tok: TokenizerParams,
                return_branch=False):
    """Replace slots j and k by [MASK] (80%), a random vector (10%) or themselves (10%)."""
    B, d, m = e.shape
    branch, rand = draw_corruption(rng, B, m)
    keep = np.ones((B, d, 1))
    is_mask = np.zeros((B, d, 1))
    noise = np.zeros((B, d, m))
    rows = np.arange(B)
    for slot, cols in enumerate((np.atleast_1d(pick.j), np.atleast_1d(pick.k))):
        b = branch[:, slot]
        keep[rows[b != KEEP], cols[b != KEEP], 0] = 0.0
        is_mask[rows[b == MASK], cols[b == MASK], 0] = 1.0
        sel = b == RANDOM
        noise[rows[sel], cols[sel]] = rand[sel, slot]
    out = ad.add(ad.add(ad.mul(e, Tensor(keep)), ad.mul(Tensor(is_mask), tok.mask_vec)), Tensor(noise))
    return (out, branch) if return_branch else out


def mlm_forward(x, pick: TargetPick, tok: TokenizerParams, heads: dict, enc_params: dict,
                enc_config: EncoderConfig, rng: np.random.Generator):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    B = x.shape[0]
    corrupted = mlm_corrupt(tokenize(x, tok), pick, rng, tok)
    f = encode(corrupted, enc_params, enc_config, causal=False, prefix="encoder.")
    rows = np.arange(B)
    j, k = np.atleast_1d(pick.j), np.atleast_1d(pick.k)
    return (numerical_loss(ad.index(f, (rows, j)), x, j, heads, tok.schema),
            categorical_loss(ad.index(f, (rows, k)), x, k, heads, tok.schema))


# --- training ------------------------------------------------------------------


@dataclass
class PretrainConfig:
    objective: str = "cbow"
    batch_size: int = 256
    lr: float = 0.01
    dim: int = 256
    depth: int = 2
    heads: int = 1
    max_epochs: int = 100
    patience: int = 5
    use_previous: bool = False
    max_missing: int | None = None
    val_fraction: float = 0.1
    eval_batch: int = 1024

    @classmethod
    def defaults(cls, objective: str, **overrides):
        if objective == "cbow":
            base = cls(objective="cbow", batch_size=256, lr=0.01, dim=256)
        elif objective == "mlm":
            base = cls(objective="mlm", batch_size=512, lr=1e-4, dim=128, depth=2, heads=1)
        else:
            raise ConfigError(f"unknown objective {objective!r}")
        for key, value in overrides.items():
            if key not in cls.__dataclass_fields__:
                raise ConfigError(f"unknown pretrain option {key!r}")
            setattr(base, key, value)
        return base

    def validate(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.objective!r}")
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 1:
            raise ConfigError("batch_size, patience must be >= 1 and max_epochs >= 0")
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in (0, 1)")
        if self.objective == "mlm":
            self.encoder_config().validate()
        if self.objective == "mlm" and self.use_previous:
            raise ConfigError("use_previous applies to CBOW only")

    def encoder_config(self, d=64):
        return EncoderConfig(depth=self.depth, heads=self.heads, dim=self.dim, max_seq=d)

    def to_dict(self):
        return asdict(self)


class PretrainModel:
    def __init__(self, config: PretrainConfig, schema: FeatureSchema, tok: TokenizerParams,
                 heads: dict, enc_params: dict | None = None):
        self.config = config
        self.schema = schema
        self.tok = tok
        self.heads = heads
        self.enc_params = enc_params or {}
        self.enc_config = config.encoder_config(schema.d) if config.objective == "mlm" else None

    @classmethod
    def init(cls, config: PretrainConfig, schema: FeatureSchema, seed: int):
        tok = init_tokenizer(schema, config.dim, seed)
        rng = np.random.default_rng([seed, 1])
        heads = init_heads(schema, config.dim, rng)
        enc = None
        if config.objective == "mlm":
            enc = init_encoder(config.encoder_config(schema.d), rng, prefix="encoder.")
        return cls(config, schema, tok, heads, enc)

    def params(self) -> dict:
        return {**self.tok.params(), **self.heads, **self.enc_params}

    def losses(self, pool: StepPool, pick: TargetPick, rng):
        if self.config.objective == "cbow":
            return cbow_forward(pool.values, pick, self.tok, self.heads,
                                self.config.use_previous, pool.prev_values)
        return mlm_forward(pool.values, pick, self.tok, self.heads, self.enc_params, self.enc_config, rng)

    def snapshot(self) -> dict:
        return {k: t.data.copy() for k, t in self.params().items()}

    def restore(self, snap: dict):
        for k, t in self.params().items():
            t.data = snap[k].copy()

    def to_checkpoint(self, seed: int, metadata: dict) -> Checkpoint:
        arrays = dict(self.tok.to_arrays())
        arrays.update({k: t.data for k, t in self.heads.items()})
        arrays.update({k: t.data for k, t in self.enc_params.items()})
        return Checkpoint(
            model_kind="tokenizer" if self.config.objective == "cbow" else "mlm",
            schema_hash=self.schema.structure_hash(),
            schema=self.schema.to_dict(),
            config={"pretrain": self.config.to_dict()},
            arrays=arrays, seed=seed, metadata=metadata,
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, schema: FeatureSchema):
        ckpt.check_schema(schema.structure_hash())
        config = PretrainConfig(**ckpt.config["pretrain"])
        tok = TokenizerParams.from_arrays(schema, ckpt.arrays)
        heads = {k: Tensor(v, requires_grad=True) for k, v in ckpt.subset("head.").items()}
        enc = {k: Tensor(v, requires_grad=True) for k, v in ckpt.subset("encoder.").items()}
        return cls(config, schema, tok, heads, enc)


@dataclass
class PretrainResult:
    model: PretrainModel
    history: list
    best_epoch: int
    best_val: float
    checkpoint: Checkpoint


def split_pool(ds: Dataset, config: PretrainConfig):
    """Split stays 90/10 (by id hash) and keep steps passing the missingness filter."""
    frac = config.val_fraction
    fit, val, _ = split_dataset(ds, seed="pretrain", fractions=(1 - frac, frac, 0.0))
    return filter_steps(fit, config.max_missing), filter_steps(val, config.max_missing)


def evaluate(model: PretrainModel, pool: StepPool, seed_key) -> tuple[float, float]:
    """Mean (L_num, L_cat) over ``pool`` with targets/corruption fixed by ``seed_key``."""
    rng = np.random.default_rng(seed_key)
    n = len(pool)
    picks = pick_targets(rng, model.schema, n)
    tot_num = tot_cat = 0.0
    bs = model.config.eval_batch
    for start in range(0, n, bs):
        sl = slice(start, min(n, start + bs))
        part = pool.take(sl)
        ln, lc = model.losses(part, TargetPick(picks.j[sl], picks.k[sl]), rng)
        tot_num += ln.item() * len(part)
        tot_cat += lc.item() * len(part)
    return tot_num / n, tot_cat / n


def pretrain(ds: Dataset, config: PretrainConfig, seed: int, progress=None) -> PretrainResult:
    """Minibatch Adam with early stopping on validation ``L_num + L_cat``.

    Epoch 0 in the history is the untrained model.  The returned model holds the
    parameters of the best validation epoch.
    """
    config.validate()
    if not ds.normalized:
        raise DataError("pretraining expects an imputed, normalized dataset")
    fit_pool, val_pool = split_pool(ds, config)
    if len(fit_pool) == 0 or len(val_pool) == 0:
        raise DataError("pretraining pool is empty after the missingness filter")
    model = PretrainModel.init(config, ds.schema, seed)
    params = model.params()
    opt = Adam(params, lr=config.lr)

    def record(epoch, train_losses):
        vn, vc = evaluate(model, val_pool, [seed, 2])
        row = {"epoch": epoch, "train_num": train_losses[0], "train_cat": train_losses[1],
               "val_num": vn, "val_cat": vc}
        history.append(row)
        if progress:
            progress(row)
        return vn + vc

    history: list = []
    best = record(0, evaluate(model, fit_pool, [seed, 4]))
    best_epoch, best_snap, stale = 0, model.snapshot(), 0
    step = 0
    n = len(fit_pool)
    for epoch in range(1, config.max_epochs + 1):
        rng = np.random.default_rng([seed, 3, epoch])
        order = rng.permutation(n)
        picks = pick_targets(rng, ds.schema, n)
        sum_num = sum_cat = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            part = fit_pool.take(idx)
            pick = TargetPick(picks.j[start:start + len(idx)], picks.k[start:start + len(idx)])
            try:
                with Tape() as tape:
                    ln, lc = model.losses(part, pick, rng)
                    loss = ad.add(ln, lc)
                grads = backward(tape, loss)
            except NumericError as exc:
                raise NumericError(f"pretraining diverged: {exc}", step=step) from None
            opt.step(named_grads(params, grads))
            step += 1
            sum_num += ln.item() * len(idx)
            sum_cat += lc.item() * len(idx)
        total = record(epoch, (sum_num / n, sum_cat / n))
        if not math.isfinite(total):
            raise NumericError("validation loss is not finite", step=step)
        if total < best:
            best, best_epoch, best_snap, stale = total, epoch, model.snapshot(), 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    model.restore(best_snap)
    meta = {"epochs_run": history[-1]["epoch"], "best_epoch": best_epoch, "best_val_loss": best,
            "train_steps": step}
    return PretrainResult(model, history, best_epoch, best, model.to_checkpoint(seed, meta))


HISTORY_COLUMNS = ("epoch", "train_num", "train_cat", "val_num", "val_cat")


def write_history(history, path):
    with open(path, "w") as fh:
        fh.write(",".join(HISTORY_COLUMNS) + "\n")
        for row in history:
            fh.write(",".join(str(row["epoch"]) if c == "epoch" else repr(float(row[c]))
                              for c in HISTORY_COLUMNS) + "\n")
