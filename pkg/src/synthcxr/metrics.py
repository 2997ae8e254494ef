"""Ranking metrics, percentile bootstrap intervals and clustering agreement scores."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment


class UndefinedMetricError(ValueError):
    pass


class DegenerateBootstrapError(RuntimeError):
    pass


@dataclass(frozen=True, init=False)
class ScoredLabels:
    labels: np.ndarray  # 1 = pneumonia
    scores: np.ndarray

    def __init__(self, labels, scores):
        labels = np.asarray(labels)
        scores = np.asarray(scores, dtype=np.float64)
        if labels.ndim != 1 or scores.ndim != 1 or len(labels) != len(scores):
            raise ValueError(f"labels and scores must be 1-D of equal length, got {labels.shape} {scores.shape}")
        if len(labels) < 1:
            raise ValueError("need at least one scored item")
        if not np.isin(labels, (0, 1)).all():
            raise ValueError("labels must be binary 0/1")
        object.__setattr__(self, "labels", labels.astype(np.int64))
        object.__setattr__(self, "scores", scores)

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx: np.ndarray) -> "ScoredLabels":
        # resamples of validated data need no re-validation
        out = object.__new__(ScoredLabels)
        object.__setattr__(out, "labels", self.labels[idx])
        object.__setattr__(out, "scores", self.scores[idx])
        return out


Metric = Callable[[ScoredLabels], float]


def _as_data(labels_or_data, scores=None) -> ScoredLabels:
    if isinstance(labels_or_data, ScoredLabels):
        return labels_or_data
    return ScoredLabels(labels_or_data, scores)


def _tie_groups(scores: np.ndarray):
    """Descending sort order and the end index (exclusive) of each tied score group."""
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    ends = np.flatnonzero(np.diff(s) != 0) + 1
    return order, np.append(ends, len(s))


def auroc(labels_or_data, scores=None) -> float:
    """P(score_pos > score_neg) + 0.5 * P(score_pos == score_neg)."""
    data = _as_data(labels_or_data, scores)
    y = data.labels
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("undefined metric: AUROC needs both classes")
    order, ends = _tie_groups(data.scores)
    pos_sorted = y[order]
    pos_cum = np.concatenate(([0], np.cumsum(pos_sorted)))[ends]
    pos_in = np.diff(np.concatenate(([0], pos_cum)))
    neg_in = np.diff(np.concatenate(([0], ends))) - pos_in
    # negatives strictly below each group = all negatives minus those at or above it
    neg_below = n_neg - np.cumsum(neg_in)
    wins = float(np.dot(pos_in, neg_below)) + 0.5 * float(np.dot(pos_in, neg_in))
    return wins / (n_pos * n_neg)


def aupr(labels_or_data, scores=None) -> float:
    """Average precision: sum over descending thresholds of (R_k - R_{k-1}) * P_k.

    Tied scores form a single threshold.
    """
    data = _as_data(labels_or_data, scores)
    y = data.labels
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("undefined metric: AUPR needs at least one positive")
    order, ends = _tie_groups(data.scores)
    tp = np.cumsum(y[order])[ends - 1].astype(np.float64)
    precision = tp / ends
    recall = tp / n_pos
    delta = np.diff(np.concatenate(([0.0], recall)))
    return float(np.dot(delta, precision))


def prevalence_baseline(labels) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("prevalence of an empty label set")
    return float(np.mean(labels == 1))


def roc_points(labels_or_data, scores=None):
    """(threshold, tpr, fpr) at each distinct score, starting from (inf, 0, 0)."""
    data = _as_data(labels_or_data, scores)
    y = data.labels
    n_pos, n_neg = int(y.sum()), int(len(y) - y.sum())
    order, ends = _tie_groups(data.scores)
    tp = np.cumsum(y[order])[ends - 1]
    fp = ends - tp
    thr = data.scores[order][ends - 1]
    tpr = tp / n_pos if n_pos else np.zeros(len(tp))
    fpr = fp / n_neg if n_neg else np.zeros(len(fp))
    return np.concatenate(([np.inf], thr)), np.concatenate(([0.0], tpr)), np.concatenate(([0.0], fpr))


def pr_points(labels_or_data, scores=None):
    """(threshold, precision, recall) at each distinct score, highest threshold first."""
    data = _as_data(labels_or_data, scores)
    y = data.labels
    n_pos = int(y.sum())
    order, ends = _tie_groups(data.scores)
    tp = np.cumsum(y[order])[ends - 1]
    thr = data.scores[order][ends - 1]
    return thr, tp / ends, (tp / n_pos if n_pos else np.zeros(len(tp)))


def write_curves(path_roc: Path, path_pr: Path, data: ScoredLabels) -> None:
    thr, tpr, fpr = roc_points(data)
    with Path(path_roc).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "tpr", "fpr"])
        w.writerows(zip(thr.tolist(), tpr.tolist(), fpr.tolist()))
    thr, prec, rec = pr_points(data)
    with Path(path_pr).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "precision", "recall"])
        w.writerows(zip(thr.tolist(), prec.tolist(), rec.tolist()))


@dataclass(frozen=True)
class MetricEstimate:
    point: float
    ci_low: float
    ci_high: float
    n_boot: int
    alpha: float
    seed: int
    method: str = "percentile"

    def to_dict(self) -> dict:
        return asdict(self)


MAX_REDRAWS = 100


def bootstrap_ci(
    metric: Metric,
    data: ScoredLabels,
    n_boot: int = 1000,
    alpha: float = 0.05,
    seed: int = 0,
) -> MetricEstimate:
    """Percentile bootstrap interval around ``metric(data)``.

    Iteration ``i`` draws from its own generator seeded with ``seed + i``.
    A resample on which the metric is undefined is redrawn, at most
    ``MAX_REDRAWS`` times per iteration.
    """
    if n_boot < 1:
        raise ValueError("n_boot must be >= 1")
    if not 0 < alpha < 1:
        raise ValueError("alpha must be in (0, 1)")
    point = metric(data)
    n = len(data)
    values = np.empty(n_boot)
    for i in range(n_boot):
        rng = np.random.default_rng(seed + i)
        for _ in range(MAX_REDRAWS):
            idx = rng.integers(0, n, size=n)
            try:
                values[i] = metric(data.take(idx))
                break
            except UndefinedMetricError:
                continue
        else:
            raise DegenerateBootstrapError(
                f"degenerate data for bootstrap: {MAX_REDRAWS} redraws in iteration {i} all undefined"
            )
    lo, hi = np.percentile(values, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    return MetricEstimate(float(point), float(lo), float(hi), int(n_boot), float(alpha), int(seed))


def _check_pair(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return a, b


def contingency(a, b) -> np.ndarray:
    a, b = _check_pair(a, b)
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    return table


def _comb2(x):
    x = np.asarray(x, dtype=np.int64)
    return x * (x - 1) // 2


def adjusted_rand_index(assignments, labels) -> float:
    """Pair-counting ARI: (index - expected) / (max - expected)."""
    assignments, labels = _check_pair(assignments, labels)
    if len(labels) < 2:
        raise ValueError("ARI needs at least two items")
    table = contingency(assignments, labels)
    # exact integer arithmetic: scale numerator and denominator by 2 * C(n, 2)
    # so the only rounding is the final (correctly rounded) int / int division
    index = int(_comb2(table).sum())
    rows = int(_comb2(table.sum(axis=1)).sum())
    cols = int(_comb2(table.sum(axis=0)).sum())
    total = int(_comb2(len(labels)))
    num = 2 * (total * index - rows * cols)
    den = total * (rows + cols) - 2 * rows * cols
    if den == 0:
        # both partitions trivial (all-one-cluster or all-singletons) and identical in kind
        return 1.0
    return num / den


def cluster_accuracy(assignments, labels) -> float:
    """Agreement after the cluster-to-class relabeling that maximizes it."""
    assignments, labels = _check_pair(assignments, labels)
    if len(labels) == 0:
        raise ValueError("empty input")
    table = contingency(assignments, labels)
    if table.shape[0] > max(table.shape[1], 2):
        raise ValueError(
            f"{table.shape[0]} clusters for {table.shape[1]} classes; accuracy needs clusters <= classes"
        )
    rows, cols = linear_sum_assignment(-table)
    return float(table[rows, cols].sum() / len(labels))


def metric_report(dataset: str, model_tag: str, metric: str, est: MetricEstimate) -> dict:
    return {"dataset": dataset, "model_tag": model_tag, "metric": metric, **est.to_dict()}


METRICS: dict[str, Metric] = {"auroc": auroc, "aupr": aupr}


def evaluate_scores(
    labels: Sequence[int], scores: Sequence[float], n_boot: int = 1000, alpha: float = 0.05, seed: int = 0
) -> dict[str, MetricEstimate]:
    data = ScoredLabels(labels, scores)
    return {name: bootstrap_ci(fn, data, n_boot, alpha, seed) for name, fn in METRICS.items()}
