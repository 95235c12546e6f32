import json

import numpy as np
import pytest

from clinembed.data import (Dataset, GeneratorSpec, StayRecord, default_max_missing, filter_steps, fit_stats,
                            generate_synthetic, impute, load_csv, manifest, normalize, prepare, split_dataset,
                            write_csv)
from clinembed.errors import ConfigError, DataError, SchemaError
from clinembed.tokenizer import FeatureSchema, FeatureSpec, default_schema


@pytest.fixture(scope="module")
def raw():
    return generate_synthetic(GeneratorSpec(n_stays=300, seed=1))


def two_feature_schema():
    return FeatureSchema([FeatureSpec("x", "numerical"), FeatureSpec("c", "categorical", 3)])


def test_generator_reproducible():
    spec = GeneratorSpec(n_stays=20, seed=4)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    for s, t in zip(a.stays, b.stays):
        assert s.stay_id == t.stay_id
        np.testing.assert_array_equal(s.values, t.values)
        np.testing.assert_array_equal(s.per_step_labels, t.per_step_labels)
    c = generate_synthetic(GeneratorSpec(n_stays=20, seed=5))
    assert not np.array_equal(np.nan_to_num(a.stays[0].values[:1]), np.nan_to_num(c.stays[0].values[:1]))


def test_generator_shape_and_prevalence(raw):
    assert len(raw) == 300 and raw.schema == default_schema()
    assert all(12 <= s.T <= 36 for s in raw.stays)
    assert raw.step_labels().mean() == pytest.approx(0.10, abs=0.02)
    for s in raw.stays:
        assert s.stay_label == int(s.per_step_labels[:48].any())
        codes = s.values[:, raw.schema.categorical_idx]
        ok = ~np.isnan(codes)
        assert np.all(codes[ok] == np.round(codes[ok]))


def test_generator_gcs_total_is_sum_of_components():
    ds = generate_synthetic(GeneratorSpec(n_stays=30, missing_rate=0.0, seed=2))
    s = ds.schema
    for st in ds.stays:
        v = st.values
        np.testing.assert_array_equal(v[:, s.index("GCST")],
                                      v[:, s.index("GCSEO")] + v[:, s.index("GCSVR")] + v[:, s.index("GCSMR")])


def test_generator_planted_correlations():
    ds = generate_synthetic(GeneratorSpec(n_stays=400, missing_rate=0.0, seed=3))
    X = np.concatenate([s.values for s in ds.stays])
    idx = ds.schema.index
    r = lambda a, b: np.corrcoef(X[:, idx(a)], X[:, idx(b)])[0, 1]  # noqa: E731
    assert r("Temp", "RR") > 0.5 and r("RR", "HR") > 0.5 and r("SBP", "DBP") > 0.5
    assert r("OS", "FIO") < -0.5
    assert abs(r("HR", "SBP")) < 0.1


def test_generator_config_errors():
    with pytest.raises(ConfigError):
        GeneratorSpec(n_stays=0).validate()
    with pytest.raises(ConfigError):
        GeneratorSpec.from_dict({"n_stays": 5, "bogus": 1})
    with pytest.raises(ConfigError):
        generate_synthetic(GeneratorSpec(factors=[{"name": "f", "loadings": {"XX": 1.0}}]))


def test_split_disjoint_complete_and_stable(raw):
    tr, va, te = split_dataset(raw, seed=0)
    ids = [{s.stay_id for s in p.stays} for p in (tr, va, te)]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    assert sum(map(len, ids)) == len(raw)
    assert abs(len(tr) / len(raw) - 0.7) < 0.08
    # assignment of a stay does not depend on which other stays are present
    tr2, _, _ = split_dataset(raw.subset(raw.stays[:100]), seed=0)
    assert {s.stay_id for s in tr2.stays} == ids[0] & {s.stay_id for s in raw.stays[:100]}
    tr3, _, _ = split_dataset(raw, seed=1)
    assert {s.stay_id for s in tr3.stays} != ids[0]


def test_stats_use_training_split_only(raw):
    p = prepare(raw)
    tr, _, _ = split_dataset(raw)
    X = np.concatenate([s.values for s in tr.stays])
    i = raw.schema.index("HR")
    col = X[:, i][~np.isnan(X[:, i])]
    assert p.schema["HR"].mean == pytest.approx(col.mean(), rel=1e-12)
    assert p.schema["HR"].std == pytest.approx(col.std(ddof=0), rel=1e-12)
    # perturbing validation/test stays changes nothing in the fitted statistics
    train_ids = {s.stay_id for s in tr.stays}
    bumped = raw.subset([s if s.stay_id in train_ids else
                         StayRecord(s.stay_id, s.values + 1000 * (~np.isnan(s.values)) * (np.arange(13) < 8),
                                    s.missing_mask, s.per_step_labels, s.stay_label) for s in raw.stays])
    assert prepare(bumped).schema == p.schema


def test_impute_then_normalize_hand_example():
    schema = two_feature_schema()
    stays = [StayRecord("a", [[1.0, 0], [np.nan, 2]], [[False, False], [True, False]]),
             StayRecord("b", [[3.0, 2], [5.0, np.nan]], [[False, False], [False, True]])]
    ds = Dataset(schema, stays)
    fitted = fit_stats(ds)
    assert fitted["x"].mean == 3.0 and fitted["x"].std == pytest.approx(np.sqrt(8 / 3))
    assert fitted["c"].mode == 2
    out = normalize(impute(ds, fitted), fitted)
    assert out.stays[0].values[1, 0] == 0.0
    assert out.stays[1].values[1, 1] == 2.0
    assert out.stays[0].values[0, 0] == pytest.approx(-2 / np.sqrt(8 / 3))
    assert out.stays[0].missing_mask[1, 0]


def test_pipeline_order_enforced():
    schema = two_feature_schema()
    ds = Dataset(schema, [StayRecord("a", [[1.0, 0], [2.0, 1]], np.zeros((2, 2), bool))])
    fitted = fit_stats(ds)
    normed = normalize(impute(ds, fitted), fitted)
    with pytest.raises(DataError):
        fit_stats(normed)
    with pytest.raises(DataError):
        normalize(normed, fitted)
    with pytest.raises(SchemaError):
        impute(ds, schema)


def test_entirely_missing_feature_rejected():
    schema = two_feature_schema()
    ds = Dataset(schema, [StayRecord("a", [[np.nan, 0]], [[True, False]])])
    with pytest.raises(SchemaError):
        fit_stats(ds)


def test_missingness_filter_threshold():
    assert default_max_missing(13) == 10 and default_max_missing(18) == 15
    d = 13
    mask = np.zeros((3, d), bool)
    mask[1, :10] = True
    mask[2, :11] = True
    ds = Dataset(default_schema(), [StayRecord("a", np.zeros((3, d)), mask)])
    pool = filter_steps(ds)
    assert pool.step_index.tolist() == [0, 1]
    np.testing.assert_array_equal(pool.prev_values[0], pool.values[0])


def test_csv_round_trip(tmp_path, raw):
    small = raw.subset(raw.stays[:5])
    write_csv(small, tmp_path / "d.csv")
    back = load_csv(tmp_path / "d.csv", default_schema())
    for s, t in zip(small.stays, back.stays):
        assert s.stay_id == t.stay_id and s.stay_label == t.stay_label
        np.testing.assert_array_equal(s.missing_mask, t.missing_mask)
        np.testing.assert_array_equal(np.nan_to_num(s.values), np.nan_to_num(t.values))
        np.testing.assert_array_equal(s.per_step_labels, t.per_step_labels)
    write_csv(back, tmp_path / "e.csv")
    assert (tmp_path / "d.csv").read_bytes() == (tmp_path / "e.csv").read_bytes()


def test_csv_schema_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("stay_id,step_index,x,c,extra\na,0,1.0,0,1\n")
    with pytest.raises(SchemaError):
        load_csv(p, two_feature_schema())
    p.write_text("stay_id,step_index,x\na,0,1.0\n")
    with pytest.raises(SchemaError):
        load_csv(p, two_feature_schema())
    p.write_text("stay_id,step_index,x,c\na,0,1.0,0\na,2,1.0,0\n")
    with pytest.raises(DataError):
        load_csv(p, two_feature_schema())


def test_manifest(raw, tmp_path):
    m = manifest(raw)
    assert m["n_stays"] == 300 and m["n_features"] == 13
    assert m["missing_fraction"] == pytest.approx(0.05, abs=0.01)
    assert m["schema_hash"] == default_schema().structure_hash()
    json.dumps(m)


def test_noise_free_loadings_are_perfectly_correlated():
    ds = generate_synthetic(GeneratorSpec(n_stays=20, noise=0.0, missing_rate=0.0, seed=0))
    X = np.concatenate([s.values for s in ds.stays])
    idx = ds.schema.index
    assert np.corrcoef(X[:, idx("Temp")], X[:, idx("RR")])[0, 1] == pytest.approx(1.0, abs=1e-12)


@pytest.fixture(scope="module")
def default_raw():
    return generate_synthetic(GeneratorSpec())


def test_default_generator_statistics(default_raw):
    X = np.concatenate([s.values for s in default_raw.stays])
    ok = ~np.isnan(X).any(axis=1)
    idx = default_raw.schema.index
    r = np.corrcoef(X[ok, idx("SBP")], X[ok, idx("DBP")])[0, 1]
    assert 0.5 <= r <= 0.9
    assert 0.08 <= default_raw.step_labels().mean() <= 0.12


def test_unreachable_prevalence():
    # logits of magnitude ~1e6 put half the steps at probability 1 whatever the intercept
    spec = GeneratorSpec(n_stays=20, label_weights={"HR": 1e6}, label_quadratic={}, label_code_effects={})
    with pytest.raises(ConfigError):
        generate_synthetic(spec)
    with pytest.raises(ConfigError):
        GeneratorSpec(prevalence=0.6).validate()


def test_normalize_two_values():
    schema = two_feature_schema()
    ds = Dataset(schema, [StayRecord("a", [[1.0, 0], [3.0, 1]], np.zeros((2, 2), bool))])
    fitted = fit_stats(ds)
    out = normalize(impute(ds, fitted), fitted)
    assert out.stays[0].values[:, 0].tolist() == [-1.0, 1.0]


def test_filter_eighteen_feature_schema():
    feats = [FeatureSpec(f"n{i}", "numerical") for i in range(17)] + [FeatureSpec("c", "categorical", 2)]
    schema = FeatureSchema(feats)
    mask = np.zeros((3, 18), bool)
    mask[1, :15] = True
    mask[2, :16] = True
    pool = filter_steps(Dataset(schema, [StayRecord("a", np.zeros((3, 18)), mask)]))
    assert pool.step_index.tolist() == [0, 1]


def test_empty_cell_is_missing_and_row_order_irrelevant(tmp_path):
    lines = ["stay_id,step_index,x,c,label", "b,1,2.5,1,0", "a,0,,2,1", "b,0,1.0,,0", "a,1,0.5,0,0"]
    p, q = tmp_path / "p.csv", tmp_path / "q.csv"
    p.write_text("\n".join(lines) + "\n")
    q.write_text("\n".join([lines[0]] + lines[:0:-1]) + "\n")
    a, b = load_csv(p, two_feature_schema()), load_csv(q, two_feature_schema())
    assert [s.stay_id for s in a.stays] == ["a", "b"]
    assert a.stays[0].missing_mask[0, 0] and a.stays[1].missing_mask[0, 1]
    for s, t in zip(a.stays, b.stays):
        np.testing.assert_array_equal(s.missing_mask, t.missing_mask)
        np.testing.assert_array_equal(np.nan_to_num(s.values), np.nan_to_num(t.values))
