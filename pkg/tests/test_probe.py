import xml.etree.ElementTree as ET

import numpy as np
import pytest

from clinembed.errors import ConfigError, IoError, SchemaError
from clinembed.probe import (ProbePoint, correlation_report, direction_cosines, emit_scatter,
                             probe_categorical, probe_numerical, stack)
from clinembed.tokenizer import default_schema, init_tokenizer
from clinembed.tsne import TsneConfig, conditional_affinities, tsne
from oracles import silhouette


@pytest.fixture
def tok():
    return init_tokenizer(default_schema(), 16, seed=3)


def test_numerical_probe_levels(tok):
    pts = probe_numerical(tok)
    assert len(pts) == 24
    for name in tok.schema.numerical_names():
        W, b = tok.num_row(name)
        lv = {p.level: p.vector for p in pts if p.feature == name}
        assert np.array_equal(lv["mid"], b)
        assert np.array_equal(lv["low"], -3 * W + b)
        assert np.array_equal(lv["high"], 3 * W + b)
        np.testing.assert_allclose(lv["low"] + lv["high"], 2 * lv["mid"], atol=1e-15)


def test_categorical_probe(tok):
    pts = probe_categorical(tok)
    assert len(pts) == sum(tok.schema.cardinalities)
    assert sum(p.feature == "GCSEO" for p in pts) == 4
    W, b = tok.cat_rows("GCSEO")
    W[2] = 0.0
    gcs = [p for p in probe_categorical(tok) if p.feature == "GCSEO"]
    assert np.array_equal(gcs[2].vector, b)
    # differences within one feature cancel the shared offset
    diffs = np.stack([p.vector - gcs[0].vector for p in gcs[1:]])
    np.testing.assert_allclose(diffs, W[1:] - W[0], atol=1e-15)


def test_probe_is_pure(tok):
    a = stack(probe_numerical(tok))
    b = stack(probe_numerical(tok))
    assert np.array_equal(a, b)


def test_identical_rows_give_cosine_one(tok):
    tok.W_num.data[1] = tok.W_num.data[0]
    names, C = direction_cosines(probe_numerical(tok))
    assert C[0, 1] == pytest.approx(1.0, abs=1e-12)


def test_report_ranks_and_cluster(tok):
    schema = tok.schema
    names = schema.numerical_names()
    rng = np.random.default_rng(0)
    base = rng.standard_normal(16)
    W = rng.standard_normal((8, 16)) * 0.3
    for a in ("Temp", "RR", "HR"):
        W[names.index(a)] += base
    W[names.index("FIO")] = -W[names.index("OS")]
    tok.W_num.data[:] = W
    tok.b_num.data[:] = 0.01 * rng.standard_normal((8, 16))
    rep = correlation_report(probe_numerical(tok),
                             {"positive": [["Temp", "RR"], ["RR", "HR"]], "negative": [["OS", "FIO"]]})
    assert rep["n_pairs"] == 28 and rep["top_quartile_size"] == 7
    assert all(p["top_quartile"] for p in rep["planted_positive"])
    assert rep["planted_negative"][0]["cosine"] == pytest.approx(-1.0)
    assert rep["recovered"] and rep["mid_clustered"]
    assert [p["rank"] for p in rep["pairs"]] == list(range(28))
    assert rep == correlation_report(probe_numerical(tok),
                                     {"positive": [["Temp", "RR"], ["RR", "HR"]], "negative": [["OS", "FIO"]]})
    with pytest.raises(SchemaError):
        correlation_report(probe_numerical(tok), {"positive": [["Temp", "GCST"]]})


def test_affinity_entropy_matches_perplexity():
    rng = np.random.default_rng(0)
    for perp in (5.0, 15.0, 25.0):
        X = rng.standard_normal((40, 6)) * rng.uniform(0.1, 10)
        D = ((X[:, None] - X[None]) ** 2).sum(-1)
        P, H = conditional_affinities(D, perp)
        assert np.all(np.abs(H - np.log(perp)) < 1e-4)
        # entropies recomputed from the returned rows, independently of the bisection
        Hr = np.array([-np.sum(r[r > 0] * np.log(r[r > 0])) for r in P])
        np.testing.assert_allclose(Hr, np.log(perp), atol=1e-4)
        np.testing.assert_allclose(P.sum(1), 1.0, atol=1e-12)


def test_symmetric_p_sums_to_one():
    X = np.random.default_rng(1).standard_normal((20, 4))
    r = tsne(X, TsneConfig(perplexity=5, iterations=10))
    assert abs(r.P.sum() - 1.0) < 1e-10
    np.testing.assert_allclose(r.P, r.P.T)


@pytest.mark.parametrize("seed", range(3))
def test_kl_decreases(seed):
    X = np.random.default_rng(seed).standard_normal((30, 10))
    r = tsne(X, TsneConfig(seed=seed, perplexity=8))
    assert r.kl[-1] < r.kl[0]


def test_two_clusters_stay_apart():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((15, 8))
    B = rng.standard_normal((15, 8)) + 10 * np.sqrt(8) * np.eye(8)[0]
    r = tsne(np.vstack([A, B]), TsneConfig(perplexity=5))
    assert silhouette(r.coords, [0] * 15 + [1] * 15) > 0.5


def test_tsne_deterministic():
    X = np.random.default_rng(2).standard_normal((12, 5))
    a = tsne(X, TsneConfig(perplexity=3, seed=4))
    b = tsne(X, TsneConfig(perplexity=3, seed=4))
    assert np.array_equal(a.coords, b.coords)


def test_duplicates_jittered(caplog):
    X = np.random.default_rng(3).standard_normal((10, 3))
    X[1] = X[0]
    r = tsne(X, TsneConfig(perplexity=3, iterations=50))
    assert np.all(np.isfinite(r.coords))
    assert "duplicate" in caplog.text


def test_tsne_contract_errors():
    with pytest.raises(ConfigError):
        tsne(np.random.default_rng(0).standard_normal((10, 3)), TsneConfig(perplexity=15))
    with pytest.raises(Exception):
        tsne(np.zeros((3, 2)))


def test_emit_scatter(tmp_path, tok):
    pts = probe_numerical(tok) + probe_categorical(tok)
    coords = np.random.default_rng(0).standard_normal((len(pts), 2))
    c1, s1 = emit_scatter(coords, pts, tmp_path / "a.csv", tmp_path / "a.svg")
    rows = (tmp_path / "a.csv").read_text().splitlines()
    assert rows[0] == "name,level,x,y" and len(rows) == len(pts) + 1
    root = ET.parse(s1).getroot()
    assert root.tag.endswith("svg")
    emit_scatter(coords, pts, tmp_path / "b.csv", tmp_path / "b.svg")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()
    with pytest.raises(IoError):
        emit_scatter(coords, pts, tmp_path / "missing" / "x.csv", tmp_path / "x.svg")
    with pytest.raises(SchemaError):
        emit_scatter(coords[:3], pts, tmp_path / "c.csv", tmp_path / "c.svg")


def test_probe_point_fields():
    p = ProbePoint("HR", "mid", np.zeros(2))
    assert (p.feature, p.level) == ("HR", "mid")
