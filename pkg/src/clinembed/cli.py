"""Command-line entry point: ``clinembed <command> [options]``.

Exit codes: 0 on success, 1 on runtime or numeric failures, 2 on usage or
configuration errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

from .checkpoint import Checkpoint
from .config import RunConfig
from .data import GeneratorSpec, generate_synthetic, load_csv, manifest, prepare, write_csv, write_json
from .downstream import MODELS, TASKS, finetune, write_metrics
from .errors import ClinEmbedError, ConfigError, SchemaError
from .experiments import SUITES, render_table, run_suite, summary_rows, with_pretrain_epochs, worker_count
from .pretraining import OBJECTIVES, pretrain, write_history
from .probe import (DEFAULT_PLANTED, correlation_report, emit_scatter, probe_categorical, probe_numerical,
                    stack, write_report)
from .tokenizer import FeatureSchema, TokenizerParams, default_schema
from .tsne import tsne

log = logging.getLogger("clinembed")

DATA_FILE = "data.csv"
SCHEMA_FILE = "schema.json"


def _run_config(args) -> RunConfig:
    return RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()


def _out_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


def _load_data(path, split_seed):
    """Prepared splits from a data directory (or a CSV file) written by ``gen-data``."""
    if os.path.isdir(path):
        csv_path = os.path.join(path, DATA_FILE)
        schema_path = os.path.join(path, SCHEMA_FILE)
    else:
        csv_path, schema_path = path, os.path.join(os.path.dirname(path) or ".", SCHEMA_FILE)
    if not os.path.isfile(csv_path):
        raise ConfigError(f"data file not found: {csv_path}")
    schema = FeatureSchema.load(schema_path) if os.path.isfile(schema_path) else default_schema()
    return prepare(load_csv(csv_path, schema), split_seed=split_seed)


def _load_checkpoint(path) -> Checkpoint:
    if not os.path.isfile(path):
        raise ConfigError(f"checkpoint not found: {path}")
    return Checkpoint.load(path)


def cmd_gen_data(args):
    run_cfg = _run_config(args)
    doc = dict(run_cfg.generator)
    if args.spec:
        try:
            with open(args.spec) as fh:
                doc.update(json.load(fh))
        except OSError as exc:
            raise ConfigError(f"cannot read generator spec: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"generator spec is not valid JSON: {exc}") from None
    for key in ("seed", "n_stays"):
        if getattr(args, key) is not None:
            doc[key] = getattr(args, key)
    spec = GeneratorSpec.from_dict(doc)
    ds = generate_synthetic(spec)
    out = _out_dir(args.out)
    write_csv(ds, os.path.join(out, DATA_FILE))
    ds.schema.save(os.path.join(out, SCHEMA_FILE))
    write_json(spec.to_dict(), os.path.join(out, "generator.json"))
    write_json(manifest(ds), os.path.join(out, "manifest.json"))
    print(f"wrote {len(ds)} stays to {out}")


def cmd_pretrain(args):
    run_cfg = _run_config(args)
    cfg = run_cfg.pretrain_config(args.objective, max_epochs=args.max_epochs, batch_size=args.batch_size,
                                  lr=args.lr, dim=args.dim, use_previous=args.use_previous or None)
    data = _load_data(args.data, run_cfg.split_seed)
    progress = (lambda row: log.info("epoch %(epoch)d val_num %(val_num).4f val_cat %(val_cat).4f", row))
    res = pretrain(data.train, cfg, seed=args.seed, progress=progress)
    out = _out_dir(args.out)
    res.checkpoint.save(os.path.join(out, "checkpoint.json"))
    write_history(res.history, os.path.join(out, "history.csv"))
    first = res.history[0]["val_num"] + res.history[0]["val_cat"]
    print(f"best epoch {res.best_epoch}: validation loss {res.best_val:.4f} (epoch 0: {first:.4f})")


def _write_rows(path, rows, columns):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])


SUMMARY_COLUMNS = ("model", "task", "label_fraction", "n_seeds", "auprc", "auroc", "auprc_mean", "auroc_mean")


def cmd_finetune(args):
    if args.model in ("cbow", "mlm") and not args.from_ckpt:
        raise ConfigError(f"--model {args.model} needs a pretrained checkpoint (--from)")
    run_cfg = _run_config(args)
    cfg = run_cfg.finetune_config(model=args.model, task=args.task, label_fraction=args.label_fraction,
                                  max_epochs=args.max_epochs, freeze_tokenizer=args.freeze_tokenizer or None)
    pretrained = _load_checkpoint(args.from_ckpt) if args.from_ckpt else None
    data = _load_data(args.data, run_cfg.split_seed)
    out = _out_dir(args.out)
    rows = []
    for seed in args.seed:
        progress = (lambda row: log.info("epoch %(epoch)d val_auprc %(val_auprc).4f", row))
        res = finetune(data.train, data.val, data.test, cfg, pretrained=pretrained, seed=seed, progress=progress)
        res.checkpoint.save(os.path.join(out, f"checkpoint-seed{seed}.json"))
        _write_rows(os.path.join(out, f"history-seed{seed}.csv"), res.history,
                    ("epoch", "train_loss", "val_auprc", "val_auroc"))
        rows.append(res.metrics)
        print(f"seed {seed}: test AUPRC {res.metrics['auprc']:.4f} AUROC {res.metrics['auroc']:.4f}")
    write_metrics(rows, os.path.join(out, "metrics.csv"))
    if len(rows) > 1:
        summ = summary_rows(rows)
        _write_rows(os.path.join(out, "summary.csv"), summ, SUMMARY_COLUMNS)
        print(f"mean over {len(rows)} seeds: AUPRC {summ[0]['auprc']} AUROC {summ[0]['auroc']}")


def cmd_probe(args):
    ckpt = _load_checkpoint(args.from_ckpt)
    if ckpt.schema is None:
        raise SchemaError("checkpoint does not carry its feature schema")
    schema = FeatureSchema.from_dict(ckpt.schema)
    ckpt.check_schema(schema.structure_hash())
    tok = TokenizerParams.from_arrays(schema, ckpt.arrays, requires_grad=False)
    planted = DEFAULT_PLANTED
    if args.planted:
        try:
            with open(args.planted) as fh:
                planted = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read planted pairs: {exc}") from None
        if not isinstance(planted, dict) or set(planted) - {"positive", "negative"}:
            raise ConfigError('planted pairs must be {"positive": [[a, b], ...], "negative": [...]}')
    tcfg = _run_config(args).tsne_config(seed=args.seed, perplexity=args.perplexity, iterations=args.iterations)
    out = _out_dir(args.out)
    points = probe_numerical(tok)
    report = correlation_report(points, planted)
    res = tsne(stack(points), tcfg)
    report["tsne"] = {"config": tcfg.to_dict(), "kl_initial": float(res.kl[0]), "kl_final": float(res.kl[-1])}
    emit_scatter(res.coords, points, os.path.join(out, "probe.csv"), os.path.join(out, "probe.svg"))
    write_report(report, os.path.join(out, "report.json"))
    if args.categorical:
        cat_points = probe_categorical(tok)
        cres = tsne(stack(cat_points), tcfg)
        emit_scatter(cres.coords, cat_points, os.path.join(out, "probe_categorical.csv"),
                     os.path.join(out, "probe_categorical.svg"))
    print(f"planted pairs recovered: {report['recovered']}; mid-level clustered: {report['mid_clustered']}")


def cmd_replicate(args):
    run_cfg = with_pretrain_epochs(_run_config(args), args.pretrain_epochs)
    if args.max_epochs is not None:
        run_cfg.finetune = {**run_cfg.finetune, "max_epochs": args.max_epochs}
    data = _load_data(args.data, run_cfg.split_seed)
    out = _out_dir(args.out)
    rows = run_suite(data, args.suite, args.seeds, run_cfg, workers=worker_count(),
                     pretrain_dir=os.path.join(out, "pretrain"))
    write_metrics(rows, os.path.join(out, "metrics.csv"))
    _write_rows(os.path.join(out, "summary.csv"), summary_rows(rows), SUMMARY_COLUMNS)
    table = render_table(rows, args.suite)
    with open(os.path.join(out, "table.md"), "w") as fh:
        fh.write(table)
    print(table, end="")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="clinembed", description="Clinical feature embeddings: data, "
                                "pre-training, fine-tuning and probing.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--spec", help="generator spec JSON")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--n-stays", type=int, dest="n_stays")
    g.add_argument("--config")
    g.set_defaults(func=cmd_gen_data)

    pt = sub.add_parser("pretrain", help="CBOW or MLM pre-training of the feature tokenizer")
    pt.add_argument("--data", required=True, help="directory from gen-data, or a CSV file")
    pt.add_argument("--objective", choices=OBJECTIVES, required=True)
    pt.add_argument("--seed", type=int, default=0)
    pt.add_argument("--out", required=True)
    pt.add_argument("--config")
    pt.add_argument("--max-epochs", type=int, dest="max_epochs")
    pt.add_argument("--batch-size", type=int, dest="batch_size")
    pt.add_argument("--lr", type=float)
    pt.add_argument("--dim", type=int)
    pt.add_argument("--use-previous", action="store_true", dest="use_previous")
    pt.set_defaults(func=cmd_pretrain)

    ft = sub.add_parser("finetune", help="fine-tune a downstream model")
    ft.add_argument("--data", required=True)
    ft.add_argument("--model", choices=MODELS, required=True)
    ft.add_argument("--task", choices=TASKS, default="per_step")
    ft.add_argument("--label-fraction", type=float, default=1.0, dest="label_fraction")
    ft.add_argument("--from", dest="from_ckpt", help="pretrained checkpoint")
    ft.add_argument("--seed", type=int, nargs="+", default=[0])
    ft.add_argument("--out", required=True)
    ft.add_argument("--config")
    ft.add_argument("--max-epochs", type=int, dest="max_epochs")
    ft.add_argument("--freeze-tokenizer", action="store_true", dest="freeze_tokenizer")
    ft.set_defaults(func=cmd_finetune)

    pr = sub.add_parser("probe", help="probe a tokenizer with artificial inputs and run t-SNE")
    pr.add_argument("--from", dest="from_ckpt", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--planted", help='JSON {"positive": [[a, b], ...], "negative": [[a, b], ...]}')
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--perplexity", type=float)
    pr.add_argument("--iterations", type=int)
    pr.add_argument("--categorical", action="store_true", help="also embed the categorical probe points")
    pr.add_argument("--config")
    pr.set_defaults(func=cmd_probe)

    rp = sub.add_parser("replicate", help="run an experiment matrix and print its table")
    rp.add_argument("--suite", choices=SUITES, required=True)
    rp.add_argument("--data", required=True)
    rp.add_argument("--out", required=True)
    rp.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    rp.add_argument("--config")
    rp.add_argument("--max-epochs", type=int, dest="max_epochs", help="fine-tuning epoch cap")
    rp.add_argument("--pretrain-epochs", type=int, dest="pretrain_epochs")
    rp.set_defaults(func=cmd_replicate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ConfigError, SchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ClinEmbedError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
