"""Experiment matrices (model x task x label fraction x seed) and result tables."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .checkpoint import Checkpoint
from .config import RunConfig
from .data import Prepared
from .downstream import MODELS, REPLICATION_FRACTIONS, finetune
from .errors import ConfigError
from .metrics import aggregate_runs, format_mean_std
from .pretraining import pretrain

log = logging.getLogger(__name__)

SUITES = ("core", "labels", "ablation")
MODEL_LABELS = {"transformer": "Transformer", "ftt": "FTT", "cbow": "CBOW", "mlm": "MLM"}
TASK_LABELS = {"per_step": "Decompensation", "stay_level": "Mortality"}


@dataclass(frozen=True)
class Cell:
    model: str
    task: str
    label_fraction: float
    seed: int
    use_previous: bool = False

    @property
    def pretrain_key(self):
        if self.model == "cbow":
            return ("cbow", self.use_previous, self.seed)
        if self.model == "mlm":
            return ("mlm", False, self.seed)
        return None


def plan(suite: str, seeds) -> list[Cell]:
    if suite == "core":
        return [Cell(m, t, 1.0, s) for t in ("per_step", "stay_level") for m in MODELS for s in seeds]
    if suite == "labels":
        return [Cell(m, "per_step", f, s) for f in REPLICATION_FRACTIONS for m in MODELS for s in seeds]
    if suite == "ablation":
        return [Cell("cbow", "per_step", 1.0, s, prev) for prev in (False, True) for s in seeds]
    raise ConfigError(f"unknown suite {suite!r}; expected one of {SUITES}")


def worker_count() -> int:
    raw = os.environ.get("CLINEMBED_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"CLINEMBED_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("CLINEMBED_THREADS must be >= 1")
    return n


def _pretrain_job(args):
    prepared, run_cfg, (objective, use_previous, seed) = args
    cfg = run_cfg.pretrain_config(objective, use_previous=use_previous)
    return pretrain(prepared.train, cfg, seed=seed).checkpoint.to_dict()


def _finetune_job(args):
    prepared, run_cfg, cell, ckpt_doc = args
    cfg = run_cfg.finetune_config(model=cell.model, task=cell.task, label_fraction=cell.label_fraction)
    ckpt = Checkpoint.from_dict(ckpt_doc) if ckpt_doc is not None else None
    res = finetune(prepared.train, prepared.val, prepared.test, cfg, pretrained=ckpt, seed=cell.seed)
    row = dict(res.metrics)
    if cell.use_previous:
        row["model"] = "cbow+previous"
    return row


def _map(fn, jobs, workers):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(fn, jobs))


def run_suite(prepared: Prepared, suite: str, seeds, run_cfg: RunConfig | None = None,
              workers: int = 1, pretrain_dir=None) -> list[dict]:
    """Run every cell of ``suite``; pretrained checkpoints are saved under ``pretrain_dir`` if given."""
    run_cfg = run_cfg or RunConfig()
    cells = plan(suite, seeds)
    keys = sorted({c.pretrain_key for c in cells if c.pretrain_key is not None})
    docs = _map(_pretrain_job, [(prepared, run_cfg, k) for k in keys], workers)
    pretrained = dict(zip(keys, docs))
    if pretrain_dir is not None:
        os.makedirs(pretrain_dir, exist_ok=True)
        for (objective, prev, seed), doc in pretrained.items():
            name = f"{objective}{'-previous' if prev else ''}-seed{seed}.json"
            Checkpoint.from_dict(doc).save(os.path.join(pretrain_dir, name))
    jobs = [(prepared, run_cfg, c, pretrained.get(c.pretrain_key)) for c in cells]
    return _map(_finetune_job, jobs, workers)


def _cell(values):
    if len(values) == 1:
        return f"{values[0] * 100:.1f}"
    return format_mean_std(*aggregate_runs(values))


def _group(rows, **match):
    return [r for r in rows if all(r[k] == v for k, v in match.items())]


def summary_rows(rows) -> list[dict]:
    """One mean/std row per (model, task, label_fraction)."""
    out = []
    keys = list(dict.fromkeys((r["model"], r["task"], r["label_fraction"]) for r in rows))
    for model, task, frac in keys:
        grp = _group(rows, model=model, task=task, label_fraction=frac)
        pr = [r["auprc"] for r in grp]
        ro = [r["auroc"] for r in grp]
        out.append({"model": model, "task": task, "label_fraction": frac, "n_seeds": len(grp),
                    "auprc_mean": float(np.mean(pr)), "auroc_mean": float(np.mean(ro)),
                    "auprc": _cell(pr), "auroc": _cell(ro)})
    return out


def render_table(rows, suite: str) -> str:
    """Markdown table in the layout of the corresponding results table, values in percent."""
    summ = summary_rows(rows)

    def find(**match):
        got = _group(summ, **match)
        return got[0] if got else {"auprc": "-", "auroc": "-"}

    lines = []
    if suite == "core":
        lines.append("| Task | Decompensation | | Mortality | |")
        lines.append("|---|---|---|---|---|")
        lines.append("| Metric | AUPRC | AUROC | AUPRC | AUROC |")
        for m in MODELS:
            a, b = find(model=m, task="per_step"), find(model=m, task="stay_level")
            lines.append(f"| {MODEL_LABELS[m]} | {a['auprc']} | {a['auroc']} | {b['auprc']} | {b['auroc']} |")
    elif suite == "labels":
        lines.append("| Labels | Models | AUPRC | AUROC |")
        lines.append("|---|---|---|---|")
        for f in REPLICATION_FRACTIONS:
            for i, m in enumerate(MODELS):
                c = find(model=m, label_fraction=f)
                label = f"{f * 100:g}%" if i == 0 else ""
                lines.append(f"| {label} | {MODEL_LABELS[m]} | {c['auprc']} | {c['auroc']} |")
    elif suite == "ablation":
        lines.append("| Use_previous | AUPRC | AUROC |")
        lines.append("|---|---|---|")
        for flag, name in ((False, "cbow"), (True, "cbow+previous")):
            c = find(model=name)
            lines.append(f"| {flag} | {c['auprc']} | {c['auroc']} |")
    else:
        raise ConfigError(f"unknown suite {suite!r}")
    return "\n".join(lines) + "\n"


def with_pretrain_epochs(run_cfg: RunConfig, epochs: int | None) -> RunConfig:
    if epochs is None:
        return run_cfg
    return replace(run_cfg, pretrain={**run_cfg.pretrain, "max_epochs": epochs})
