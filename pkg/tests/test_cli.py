import csv
import json
from pathlib import Path

import pytest

from clinembed.cli import main
from clinembed.config import RunConfig
from clinembed.errors import ConfigError

SMALL = {
    "generator": {"t_min": 3, "t_max": 8},
    "pretrain": {"dim": 8, "max_epochs": 1, "batch_size": 64, "depth": 1},
    "finetune": {"dim": 8, "max_epochs": 1},
    "tsne": {"iterations": 300, "perplexity": 5.0},
}


def run(*argv):
    return main([str(a) for a in argv])


def pipeline(root: Path):
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(SMALL))
    assert run("gen-data", "--out", root / "data", "--n-stays", 60, "--seed", 3, "--config", cfg) == 0
    assert run("pretrain", "--data", root / "data", "--objective", "cbow", "--seed", 1,
               "--out", root / "cbow", "--config", cfg) == 0
    assert run("pretrain", "--data", root / "data", "--objective", "mlm", "--seed", 1,
               "--out", root / "mlm", "--config", cfg) == 0
    assert run("finetune", "--data", root / "data", "--model", "mlm", "--from", root / "mlm/checkpoint.json",
               "--seed", 0, 1, "--out", root / "ft", "--config", cfg) == 0
    assert run("probe", "--from", root / "cbow/checkpoint.json", "--out", root / "probe", "--seed", 2,
               "--categorical", "--config", cfg) == 0


@pytest.fixture(scope="module")
def twice(tmp_path_factory):
    a, b = tmp_path_factory.mktemp("a"), tmp_path_factory.mktemp("b")
    pipeline(a)
    pipeline(b)
    return a, b


def files(root):
    return sorted(p.relative_to(root) for p in root.rglob("*") if p.is_file() and p.name != "cfg.json")


def test_expected_outputs(twice):
    a, _ = twice
    names = {str(p) for p in files(a)}
    for f in ("data/data.csv", "data/schema.json", "data/manifest.json", "data/generator.json",
              "cbow/checkpoint.json", "cbow/history.csv", "mlm/checkpoint.json",
              "ft/checkpoint-seed0.json", "ft/checkpoint-seed1.json", "ft/history-seed0.csv",
              "ft/metrics.csv", "ft/summary.csv", "probe/probe.csv", "probe/probe.svg", "probe/report.json",
              "probe/probe_categorical.csv", "probe/probe_categorical.svg"):
        assert f in names, f
    rows = list(csv.DictReader(open(a / "ft/metrics.csv")))
    assert [r["seed"] for r in rows] == ["0", "1"] and all(r["model"] == "mlm" for r in rows)
    report = json.loads((a / "probe/report.json").read_text())
    assert report["top_quartile_size"] == 7 and len(report["pairs"]) == 28
    assert report["tsne"]["kl_final"] < report["tsne"]["kl_initial"]


def test_seeded_commands_are_byte_identical(twice):
    a, b = twice
    assert files(a) == files(b)
    for rel in files(a):
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_replicate_labels_suite(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(SMALL))
    assert run("gen-data", "--out", tmp_path / "d", "--n-stays", 160, "--config", cfg) == 0
    assert run("replicate", "--suite", "labels", "--data", tmp_path / "d", "--out", tmp_path / "r",
               "--seeds", 0, 1, "--config", cfg) == 0
    lines = (tmp_path / "r/table.md").read_text().splitlines()
    assert lines[0] == "| Labels | Models | AUPRC | AUROC |"
    assert len(lines) == 2 + 16
    assert lines[2].startswith("| 100% | Transformer |") and lines[-4].startswith("| 1% | Transformer |")
    assert "±" in lines[2]
    assert len(list(csv.DictReader(open(tmp_path / "r/metrics.csv")))) == 32
    assert sorted(p.name for p in (tmp_path / "r/pretrain").iterdir()) == [
        "cbow-seed0.json", "cbow-seed1.json", "mlm-seed0.json", "mlm-seed1.json"]


def test_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"pretrain": {"momentum": 0.9}}))
    assert run("gen-data", "--out", tmp_path / "d", "--config", bad) == 2
    assert run("pretrain", "--data", tmp_path / "nothing", "--objective", "cbow", "--out", tmp_path / "o") == 2
    assert run("finetune", "--data", tmp_path / "nothing", "--model", "cbow", "--out", tmp_path / "o") == 2
    junk = tmp_path / "junk.json"
    junk.write_text("{not json")
    assert run("probe", "--from", junk, "--out", tmp_path / "p") == 2
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert run("gen-data", "--out", blocker, "--n-stays", 5) == 1
    with pytest.raises(SystemExit) as exc:
        run("pretrain", "--objective", "sgns")
    assert exc.value.code == 2
    assert "error:" in capsys.readouterr().err


def test_run_config_rejects_unknown_keys(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"pretraining": {}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"finetune": {"dropout": 0.1}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"tsne": {"perplexity": 5, "angle": 0.5}})
    cfg = RunConfig.from_dict(SMALL)
    assert cfg.pretrain_config("mlm").dim == 8
    assert cfg.pretrain_config("cbow", dim=None).batch_size == 64
    assert cfg.finetune_config(model="ftt").max_epochs == 1
    p = tmp_path / "c.json"
    p.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        RunConfig.load(p)
