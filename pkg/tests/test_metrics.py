import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import ari_pairs, auroc_pairs, average_precision_sweep
from synthcxr.metrics import (
    DegenerateBootstrapError,
    MetricEstimate,
    ScoredLabels,
    UndefinedMetricError,
    adjusted_rand_index,
    aupr,
    auroc,
    bootstrap_ci,
    cluster_accuracy,
    prevalence_baseline,
    write_curves,
)


def test_auroc_worked_example():
    assert auroc([0, 0, 1, 1], [0.1, 0.4, 0.35, 0.8]) == pytest.approx(0.75, abs=1e-15)


def test_auroc_perfect_and_all_ties():
    assert auroc([0, 0, 1, 1], [0.1, 0.2, 0.3, 0.4]) == 1.0
    assert auroc([0, 1, 0, 1, 1], [0.5] * 5) == 0.5


def test_auroc_single_class_is_undefined():
    with pytest.raises(UndefinedMetricError, match="undefined metric"):
        auroc([1, 1, 1], [0.1, 0.2, 0.3])


def test_aupr_examples():
    assert aupr([0, 1], [0.2, 0.9]) == 1.0
    assert aupr([1, 0, 1], [0.9, 0.8, 0.7]) == pytest.approx(5 / 6, abs=1e-15)


@pytest.mark.parametrize("labels", [[1, 0, 0, 0], [1, 1, 0], [1, 0, 1, 0, 1, 1, 0]])
def test_aupr_all_tied_equals_prevalence(labels):
    scores = [0.3] * len(labels)
    expected = sum(labels) / len(labels)
    assert aupr(labels, scores) == pytest.approx(expected, abs=1e-15)
    assert average_precision_sweep(labels, scores) == pytest.approx(expected, abs=1e-15)


def test_aupr_without_positives_is_undefined():
    with pytest.raises(UndefinedMetricError):
        aupr([0, 0], [0.1, 0.2])


def test_prevalence_baseline():
    assert prevalence_baseline([0] * 1583 + [1] * 4273) == pytest.approx(0.7296789617, abs=1e-9)
    assert prevalence_baseline([0] * 8851 + [1] * 6012) == pytest.approx(0.4044943820, abs=1e-9)
    assert prevalence_baseline([0, 0, 0]) == 0.0


@st.composite
def scored(draw, max_n=12, quantize=True):
    n = draw(st.integers(2, max_n))
    labels = draw(st.lists(st.integers(0, 1), min_size=n, max_size=n).filter(lambda l: 0 < sum(l) < len(l)))
    if quantize:
        scores = draw(st.lists(st.integers(0, 5).map(lambda v: v / 5), min_size=n, max_size=n))
    else:
        # distinct and well separated so exp() keeps them distinct in floating point
        scores = draw(st.lists(st.integers(-40, 40), min_size=n, max_size=n, unique=True))
        scores = [v / 8 for v in scores]
    return labels, scores


@settings(max_examples=200, deadline=None)
@given(scored())
def test_metrics_match_brute_force(case):
    labels, scores = case
    assert abs(auroc(labels, scores) - auroc_pairs(labels, scores)) <= 1e-12
    assert abs(aupr(labels, scores) - average_precision_sweep(labels, scores)) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(scored(quantize=False))
def test_rank_metrics_invariant_under_increasing_transforms(case):
    labels, scores = case
    s = np.array(scores)
    for transformed in (np.exp(s), 3.0 * s + 7.0):
        assert auroc(labels, transformed) == pytest.approx(auroc(labels, s), abs=1e-12)
        assert aupr(labels, transformed) == pytest.approx(aupr(labels, s), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(scored(quantize=False))
def test_auroc_of_negated_scores_is_complement(case):
    labels, scores = case
    s = np.array(scores)
    assert auroc(labels, s) + auroc(labels, -s) == pytest.approx(1.0, abs=1e-12)


def test_bootstrap_records_parameters():
    rng = np.random.default_rng(0)
    labels = np.r_[np.zeros(40), np.ones(40)]
    scores = labels + rng.normal(size=80)
    est = bootstrap_ci(auroc, ScoredLabels(labels, scores), n_boot=1000, alpha=0.05, seed=3)
    assert isinstance(est, MetricEstimate)
    assert (est.n_boot, est.alpha, est.seed, est.method) == (1000, 0.05, 3, "percentile")
    assert est.ci_low <= est.point <= est.ci_high


def test_bootstrap_two_point_data_is_degenerate_interval():
    est = bootstrap_ci(auroc, ScoredLabels([0, 1], [0.2, 0.7]), n_boot=200, seed=1)
    assert est.point == 1.0
    assert est.ci_low == est.ci_high == 1.0


def test_bootstrap_same_seed_is_bit_identical():
    rng = np.random.default_rng(5)
    data = ScoredLabels(rng.integers(0, 2, 60), rng.normal(size=60))
    assert bootstrap_ci(aupr, data, 300, seed=11) == bootstrap_ci(aupr, data, 300, seed=11)


def test_bootstrap_fails_loudly_when_every_redraw_is_undefined():
    data = ScoredLabels([0, 1, 0, 1], [0.1, 0.9, 0.2, 0.8])

    def only_on_original(d):
        if d is not data:
            raise UndefinedMetricError("undefined metric")
        return 1.0

    with pytest.raises(DegenerateBootstrapError, match="degenerate data for bootstrap"):
        bootstrap_ci(only_on_original, data, n_boot=3)


def test_bootstrap_redraws_single_class_resamples():
    # two items: half of all resamples are single-class and must be redrawn, not dropped
    est = bootstrap_ci(auroc, ScoredLabels([0, 1], [0.9, 0.1]), n_boot=500, seed=2)
    assert est.point == est.ci_low == est.ci_high == 0.0


def test_ari_hand_cases():
    assert adjusted_rand_index([0, 0, 1, 1], [0, 0, 1, 1]) == 1.0
    assert adjusted_rand_index([5, 5, 2, 2], [0, 0, 1, 1]) == 1.0
    assert adjusted_rand_index([0, 1, 0, 1], [0, 0, 1, 1]) == pytest.approx(-0.5, abs=1e-15)
    assert adjusted_rand_index([0, 0, 0, 0], [0, 0, 1, 1]) == 0.0


def test_ari_length_mismatch():
    with pytest.raises(ValueError, match="length mismatch"):
        adjusted_rand_index([0, 1], [0, 1, 1])


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 10).flatmap(lambda n: st.tuples(
    st.lists(st.integers(0, 1), min_size=n, max_size=n), st.lists(st.integers(0, 1), min_size=n, max_size=n))))
def test_ari_matches_pair_counting_and_is_symmetric(pair):
    a, b = pair
    assert adjusted_rand_index(a, b) == pytest.approx(ari_pairs(a, b), abs=1e-12)
    assert adjusted_rand_index(a, b) == pytest.approx(adjusted_rand_index(b, a), abs=1e-12)
    relabeled = [1 - v for v in a]
    assert adjusted_rand_index(relabeled, b) == pytest.approx(adjusted_rand_index(a, b), abs=1e-12)


def test_cluster_accuracy_cases():
    assert cluster_accuracy([0, 0, 1, 1], [0, 0, 1, 1]) == 1.0
    assert cluster_accuracy([1, 1, 0, 0], [0, 0, 1, 1]) == 1.0
    assert cluster_accuracy([0, 1, 0, 1], [0, 0, 1, 1]) == 0.5
    with pytest.raises(ValueError):
        cluster_accuracy([0, 1], [0])


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 15).flatmap(lambda n: st.tuples(
    st.lists(st.integers(0, 1), min_size=n, max_size=n), st.lists(st.integers(0, 1), min_size=n, max_size=n))))
def test_cluster_accuracy_at_least_half(pair):
    a, b = pair
    acc = cluster_accuracy(a, b)
    agree = np.mean(np.array(a) == np.array(b))
    assert acc >= 0.5
    assert acc == pytest.approx(max(agree, 1 - agree))


def test_curve_export(tmp_path):
    data = ScoredLabels([0, 1, 1, 0], [0.1, 0.9, 0.4, 0.4])
    write_curves(tmp_path / "roc.csv", tmp_path / "pr.csv", data)
    roc = list(csv.DictReader((tmp_path / "roc.csv").open()))
    pr = list(csv.DictReader((tmp_path / "pr.csv").open()))
    assert roc[0] == {"threshold": "inf", "tpr": "0.0", "fpr": "0.0"}
    assert (float(roc[-1]["tpr"]), float(roc[-1]["fpr"])) == (1.0, 1.0)
    assert [float(r["threshold"]) for r in pr] == [0.9, 0.4, 0.1]
    assert float(pr[-1]["recall"]) == 1.0
