"""K-means on extracted features, clustering scores and 2-D embeddings for scatter plots."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from synthcxr.metrics import adjusted_rand_index, cluster_accuracy

logger = logging.getLogger(__name__)

DEFAULT_RESTARTS = 10
MAX_ITER = 300


@dataclass
class FeatureMatrix:
    rows: np.ndarray
    record_ids: List[str]
    model_tag: str = ""

    def __post_init__(self):
        self.rows = np.asarray(self.rows)
        if self.rows.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {self.rows.shape}")
        if len(self.record_ids) != self.rows.shape[0]:
            raise ValueError("record_ids length does not match feature rows")
        if self.rows.shape[0] < 2:
            raise ValueError("need at least two feature rows")
        if not np.isfinite(self.rows).all():
            raise ValueError("features contain non-finite entries")

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        np.savez(path, rows=self.rows, record_ids=np.array(self.record_ids), model_tag=self.model_tag)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "FeatureMatrix":
        with np.load(path) as z:
            return cls(z["rows"], z["record_ids"].tolist(), str(z["model_tag"]))


def _as_array(features) -> np.ndarray:
    rows = features.rows if isinstance(features, FeatureMatrix) else np.asarray(features)
    return np.asarray(rows, dtype=np.float64)


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centers: np.ndarray
    inertia: float
    restart: int
    n_iter: int
    history: List[float] = field(default_factory=list)  # objective after each assignment step
    n_empty: int = 0


def _sq_dists(x: np.ndarray, x_sq: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = x_sq[:, None] - 2.0 * x @ centers.T + (centers**2).sum(axis=1)[None, :]
    return np.maximum(d, 0.0)


def _inertia(x: np.ndarray, assign: np.ndarray, centers: np.ndarray) -> float:
    return float(((x - centers[assign]) ** 2).sum())


def _plusplus(x: np.ndarray, x_sq: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    d2 = _sq_dists(x, x_sq, np.array(centers))[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # every point coincides with a chosen center; remaining clusters stay empty
            centers.append(centers[-1])
            continue
        idx = rng.choice(n, p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, _sq_dists(x, x_sq, x[idx][None, :])[:, 0])
    return np.array(centers)


def _lloyd(x, x_sq, centers, max_iter):
    k = centers.shape[0]
    history = []
    assign = None
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        new_assign = np.argmin(_sq_dists(x, x_sq, centers), axis=1)
        history.append(_inertia(x, new_assign, centers))
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            members = assign == j
            if members.any():
                centers[j] = x[members].mean(axis=0)
    # centers are the means of the final assignment at this point
    return assign, centers, history, n_iter


def _hartigan(x, assign, centers, history, max_passes=MAX_ITER):
    """Single-point transfers that strictly lower the objective, until none remain.

    Moving point i from cluster a to b changes the objective by
    n_b/(n_b+1)*|x_i-c_b|^2 - n_a/(n_a-1)*|x_i-c_a|^2.
    """
    k = centers.shape[0]
    counts = np.bincount(assign, minlength=k).astype(np.float64)
    for _ in range(max_passes):
        moved = False
        for i in range(x.shape[0]):
            a = assign[i]
            if counts[a] <= 1:
                continue
            d = ((centers - x[i]) ** 2).sum(axis=1)
            gain_out = counts[a] / (counts[a] - 1) * d[a]
            cost_in = counts / (counts + 1) * d
            cost_in[a] = np.inf
            b = int(np.argmin(cost_in))
            if cost_in[b] < gain_out * (1 - 1e-12):
                centers[a] = (centers[a] * counts[a] - x[i]) / (counts[a] - 1)
                centers[b] = (centers[b] * counts[b] + x[i]) / (counts[b] + 1)
                counts[a] -= 1
                counts[b] += 1
                assign[i] = b
                moved = True
        if not moved:
            break
        for j in range(k):
            if counts[j]:
                centers[j] = x[assign == j].mean(axis=0)
        history.append(_inertia(x, assign, centers))
    return assign, centers


def kmeans_fit(
    features,
    k: int = 2,
    seed: int = 0,
    restarts: int = DEFAULT_RESTARTS,
    max_iter: int = MAX_ITER,
    refine: bool = True,
) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding, best of ``restarts`` runs.

    With ``refine`` each Lloyd solution is polished by Hartigan single-point
    transfers, which escapes some Lloyd fixed points that are not optimal.

    Restart ``r`` is seeded with ``(seed, r)``; the lowest within-cluster sum
    of squares wins, ties going to the lowest restart index.
    """
    x = _as_array(features)
    n = x.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < k:
        raise ValueError(f"cannot form {k} clusters from {n} rows")
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    x_sq = (x**2).sum(axis=1)
    best: Optional[KMeansResult] = None
    for r in range(restarts):
        rng = np.random.default_rng([seed, r])
        centers = _plusplus(x, x_sq, k, rng)
        assign, centers, history, n_iter = _lloyd(x, x_sq, centers, max_iter)
        if refine:
            assign, centers = _hartigan(x, assign.copy(), centers, history)
        result = KMeansResult(assign, centers, _inertia(x, assign, centers), r, n_iter, history)
        if best is None or result.inertia < best.inertia:
            best = result
    best.n_empty = int(k - len(np.unique(best.assignments)))
    if best.n_empty:
        logger.warning("k-means left %d of %d clusters empty (degenerate features)", best.n_empty, k)
    return best


def kmeans(features, k: int = 2, seed: int = 0, restarts: int = DEFAULT_RESTARTS) -> np.ndarray:
    return kmeans_fit(features, k, seed, restarts).assignments


@dataclass
class ClusterReport:
    assignments: np.ndarray
    accuracy: float
    ari: float
    k: int
    seed: int
    restarts: int
    model_tag: str = ""
    standardized: bool = False
    n_empty: int = 0

    def to_dict(self, include_assignments: bool = False) -> dict:
        d = {
            "model_tag": self.model_tag,
            "accuracy": self.accuracy,
            "ari": self.ari,
            "k": self.k,
            "seed": self.seed,
            "restarts": self.restarts,
            "standardized": self.standardized,
            "n_empty": self.n_empty,
        }
        if include_assignments:
            d["assignments"] = self.assignments.tolist()
        return d


def standardize(x: np.ndarray) -> np.ndarray:
    std = x.std(axis=0)
    std[std == 0] = 1.0
    return (x - x.mean(axis=0)) / std


def evaluate_clustering(
    features,
    labels: Sequence[int],
    k: int = 2,
    seed: int = 0,
    restarts: int = DEFAULT_RESTARTS,
    zscore: bool = False,
) -> ClusterReport:
    x = _as_array(features)
    labels = np.asarray(labels)
    if len(labels) != x.shape[0]:
        raise ValueError(f"labels length {len(labels)} != feature rows {x.shape[0]}")
    if zscore:
        logger.info("z-scoring features before k-means")
        x = standardize(x)
    fit = kmeans_fit(x, k, seed, restarts)
    tag = features.model_tag if isinstance(features, FeatureMatrix) else ""
    return ClusterReport(
        assignments=fit.assignments,
        accuracy=cluster_accuracy(fit.assignments, labels),
        ari=adjusted_rand_index(fit.assignments, labels),
        k=k,
        seed=seed,
        restarts=restarts,
        model_tag=tag,
        standardized=zscore,
        n_empty=fit.n_empty,
    )


def pca_2d(x: np.ndarray, seed: int = 0) -> np.ndarray:
    """Top-2 principal component scores; each loading's largest-magnitude entry is positive."""
    centered = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2]
    for i, v in enumerate(comps):
        if v[np.argmax(np.abs(v))] < 0:
            comps[i] = -v
    coords = centered @ comps.T
    if coords.shape[1] < 2:
        coords = np.hstack([coords, np.zeros((coords.shape[0], 2 - coords.shape[1]))])
    return coords


def umap_2d(x: np.ndarray, seed: int = 0) -> np.ndarray:
    try:
        import umap
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise RuntimeError("umap-learn is required for the neighborhood embedding (pip install synthcxr[umap])") from exc
    reducer = umap.UMAP(n_components=2, random_state=seed, n_neighbors=min(15, x.shape[0] - 1))
    return np.asarray(reducer.fit_transform(x), dtype=np.float64)


Reducer = Callable[[np.ndarray, int], np.ndarray]
REDUCERS: Dict[str, Reducer] = {"pca": pca_2d, "neighborhood_umap_style": umap_2d, "umap": umap_2d}


def embed_2d(features, seed: int = 0, method: str = "pca") -> np.ndarray:
    x = _as_array(features)
    if not np.isfinite(x).all():
        raise ValueError("features contain non-finite entries")
    if x.shape[0] < 3:
        raise ValueError("embedding needs at least three rows")
    try:
        reducer = REDUCERS[method]
    except KeyError:
        raise ValueError(f"unknown embedding method {method!r}; choose from {sorted(REDUCERS)}") from None
    coords = reducer(x, seed)
    if coords.shape != (x.shape[0], 2) or not np.isfinite(coords).all():
        raise RuntimeError(f"reducer {method!r} returned invalid coordinates {coords.shape}")
    return coords


def write_embedding_csv(
    path: str | Path,
    record_ids: Sequence[str],
    coords: np.ndarray,
    labels: Sequence[int],
    clusters: Sequence[int],
) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["record_id", "x", "y", "label", "cluster"])
        for rid, (x, y), lab, c in zip(record_ids, coords, labels, clusters):
            w.writerow([rid, repr(float(x)), repr(float(y)), int(lab), int(c)])
    return path
