import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clinembed.errors import MetricError
from clinembed.metrics import aggregate_runs, auprc, auroc, format_mean_std, parse_mean_std
from oracles import brute_ap, brute_auc


def test_worked_example():
    s, y = [0.9, 0.8, 0.3, 0.2], [1, 0, 1, 0]
    assert auroc(s, y) == 0.75
    assert auprc(s, y) == pytest.approx((1 + 2 / 3) / 2, abs=1e-15)


def test_perfect_ranking():
    assert auroc([4, 3, 2, 1], [1, 1, 0, 0]) == 1.0
    assert auprc([4, 3, 2, 1], [1, 1, 0, 0]) == 1.0


def test_all_ties():
    assert auroc([0.5] * 6, [1, 0, 1, 0, 0, 0]) == 0.5
    # one block containing everything: precision equals prevalence
    assert auprc([0.5] * 6, [1, 0, 1, 0, 0, 0]) == pytest.approx(2 / 6)


@pytest.mark.parametrize("labels", [[1, 1, 1], [0, 0], [1]])
def test_single_class_rejected(labels):
    with pytest.raises(MetricError):
        auroc(np.arange(len(labels)), labels)
    with pytest.raises(MetricError):
        auprc(np.arange(len(labels)), labels)


def test_non_finite_rejected():
    with pytest.raises(MetricError):
        auroc([0.1, np.nan], [0, 1])


def test_exhaustive_against_oracles():
    rng = np.random.default_rng(0)
    for n in range(2, 13):
        # coarse scores so ties occur often
        scores = rng.integers(0, max(2, n // 2), size=n).astype(float) + rng.uniform(size=n) * (n % 2)
        for bits in itertools.product((0, 1), repeat=n):
            if 0 < sum(bits) < n:
                assert auroc(scores, bits) == pytest.approx(brute_auc(scores, bits), abs=1e-12)
                assert auprc(scores, bits) == pytest.approx(brute_ap(scores, bits), abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(-1000, 1000), min_size=2, max_size=40).flatmap(
    lambda s: st.tuples(st.just(s), st.lists(st.integers(0, 1), min_size=len(s), max_size=len(s)))))
def test_monotone_invariance(case):
    s, y = case
    if 0 < sum(y) < len(y):
        s = np.array(s, dtype=float)
        t = np.exp(s / 1e3) * 3 + 1
        assert auroc(t, y) == pytest.approx(auroc(s, y), abs=1e-12)
        assert auprc(t, y) == pytest.approx(auprc(s, y), abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 60), st.integers(0, 10_000))
def test_auroc_flip_symmetry(n, seed):
    rng = np.random.default_rng(seed)
    s = rng.permutation(n).astype(float)
    y = rng.integers(0, 2, size=n)
    if 0 < y.sum() < n:
        assert auroc(s, y) + auroc(-s, y) == pytest.approx(1.0, abs=1e-12)


def test_random_scores_ap_near_prevalence():
    rng = np.random.default_rng(1)
    y = rng.uniform(size=100_000) < 0.1
    assert auprc(rng.uniform(size=y.size), y) == pytest.approx(y.mean(), abs=0.05)


def test_aggregate_runs():
    assert aggregate_runs([36.3, 36.3, 36.3]) == (pytest.approx(36.3), 0.0)
    assert aggregate_runs([1, 2, 3]) == (2.0, 1.0)
    with pytest.raises(MetricError):
        aggregate_runs([1.0])


def test_format_parse_round_trip():
    cell = format_mean_std(0.364, 0.002)
    assert cell == "36.4±0.2"
    assert parse_mean_std(cell) == (36.4, 0.2)
    assert format_mean_std(*parse_mean_std("91.4±0.1"), percent=False) == "91.4±0.1"
    with pytest.raises(MetricError):
        parse_mean_std("36.4")
