import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import kmeans_exhaustive
from synthcxr.representation import (
    FeatureMatrix,
    embed_2d,
    evaluate_clustering,
    kmeans,
    kmeans_fit,
    write_embedding_csv,
)


def blobs(n=200, d=5, sep=10.0, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.repeat([0, 1], n // 2)
    x = rng.normal(size=(n, d)) + sep * labels[:, None]
    return x, labels


def test_feature_matrix_validation_and_roundtrip(tmp_path):
    fm = FeatureMatrix(np.arange(6.0).reshape(3, 2), ["a", "b", "c"], "tag")
    loaded = FeatureMatrix.load(fm.save(tmp_path / "f.npz"))
    assert np.array_equal(loaded.rows, fm.rows) and loaded.record_ids == fm.record_ids and loaded.model_tag == "tag"
    with pytest.raises(ValueError, match="non-finite"):
        FeatureMatrix(np.array([[0.0], [np.nan]]), ["a", "b"])
    with pytest.raises(ValueError, match="at least two"):
        FeatureMatrix(np.zeros((1, 3)), ["a"])
    with pytest.raises(ValueError):
        FeatureMatrix(np.zeros((2, 3)), ["a"])


def test_kmeans_recovers_separated_blobs():
    x, labels = blobs()
    report = evaluate_clustering(x, labels, seed=3)
    assert report.accuracy == 1.0 and report.ari == 1.0
    flipped = evaluate_clustering(x, 1 - labels, seed=3)
    assert (flipped.accuracy, flipped.ari) == (report.accuracy, report.ari)


def test_kmeans_small_cases():
    assert sorted(kmeans(np.array([[0.0, 0.0], [1.0, 1.0]]), k=2).tolist()) == [0, 1]
    with pytest.raises(ValueError, match="cannot form 3 clusters from 2 rows"):
        kmeans(np.array([[0.0], [1.0]]), k=3)


def test_kmeans_identical_rows_reports_empty_cluster():
    fit = kmeans_fit(np.ones((5, 3)), k=2)
    assert fit.n_empty == 1
    assert len(set(fit.assignments.tolist())) == 1
    assert fit.inertia == 0.0


def test_kmeans_is_deterministic():
    x = np.random.default_rng(1).normal(size=(60, 4))
    a, b = kmeans_fit(x, 2, seed=9), kmeans_fit(x, 2, seed=9)
    assert np.array_equal(a.assignments, b.assignments)
    assert (a.restart, a.inertia, a.history) == (b.restart, b.inertia, b.history)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(3, 60), st.integers(1, 4))
def test_kmeans_objective_non_increasing(seed, n, d):
    x = np.random.default_rng(seed).normal(size=(n, d))
    for refine in (False, True):
        fit = kmeans_fit(x, 2, seed=seed % 1000, restarts=1, refine=refine)
        h = fit.history
        assert all(b <= a + 1e-9 * max(1.0, abs(a)) for a, b in zip(h, h[1:]))
        assert fit.inertia == pytest.approx(h[-1], rel=1e-9, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 8), st.integers(1, 2), st.integers(0, 2**32 - 1))
def test_kmeans_matches_exhaustive_optimum(n, d, seed):
    x = np.random.default_rng(seed).normal(size=(n, d))
    fit = kmeans_fit(x, 2, seed=0)
    assert fit.inertia == pytest.approx(kmeans_exhaustive(x.tolist()), rel=1e-9, abs=1e-12)


def test_random_features_have_near_zero_ari():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(1000, 8))
    labels = rng.integers(0, 2, 1000)
    report = evaluate_clustering(x, labels, seed=0)
    assert abs(report.ari) < 0.1
    assert 0 <= report.accuracy <= 1


def test_zscore_flag_is_recorded():
    x, labels = blobs(seed=2)
    x[:, 0] *= 1000.0
    report = evaluate_clustering(FeatureMatrix(x, [str(i) for i in range(len(x))], "m"), labels, zscore=True)
    assert report.standardized and report.model_tag == "m"
    assert report.to_dict()["standardized"] is True


def test_pca_on_planar_data_preserves_distances():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(30, 2)) * [3.0, 1.0]
    coords = embed_2d(x)
    centered = x - x.mean(axis=0)
    assert np.allclose(coords.var(axis=0).sum(), centered.var(axis=0).sum())
    dist = lambda a: np.linalg.norm(a[:, None] - a[None], axis=-1)
    assert np.allclose(dist(coords), dist(x), atol=1e-9)
    # embedded in a higher-dimensional space by a random rotation: still exact
    q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
    lifted = np.hstack([x, np.zeros((30, 4))]) @ q
    assert np.allclose(dist(embed_2d(lifted)), dist(x), atol=1e-9)


def test_pca_collinear_points():
    x = np.array([[0.0, 0.0, 0.0], [1.0, 2.0, 3.0], [2.0, 4.0, 6.0]])
    coords = embed_2d(x)
    assert np.all(np.abs(coords[:, 1]) < 1e-8)


def test_pca_sign_convention_is_stable():
    x = np.random.default_rng(6).normal(size=(20, 5))
    assert np.allclose(embed_2d(x), embed_2d(x[::-1])[::-1])
    # loadings are sign-normalized, so negating the data negates the scores
    assert np.allclose(embed_2d(-x), -embed_2d(x))


def test_embed_errors():
    with pytest.raises(ValueError, match="non-finite"):
        embed_2d(np.array([[0.0, np.inf], [1.0, 1.0], [2.0, 2.0]]))
    with pytest.raises(ValueError, match="three rows"):
        embed_2d(np.zeros((2, 3)))
    with pytest.raises(ValueError, match="unknown embedding method"):
        embed_2d(np.zeros((3, 3)), method="tsne")


def test_umap_embedding_contract():
    pytest.importorskip("umap")
    x, _ = blobs(n=40, d=6)
    a = embed_2d(x, seed=1, method="neighborhood_umap_style")
    b = embed_2d(x, seed=1, method="neighborhood_umap_style")
    assert a.shape == (40, 2) and np.isfinite(a).all()
    assert np.array_equal(a, b)


def test_embedding_csv(tmp_path):
    coords = np.array([[0.5, -1.0], [2.0, 3.25]])
    path = write_embedding_csv(tmp_path / "e.csv", ["a", "b"], coords, [0, 1], [1, 0])
    rows = list(csv.DictReader(path.open()))
    assert rows == [
        {"record_id": "a", "x": "0.5", "y": "-1.0", "label": "0", "cluster": "1"},
        {"record_id": "b", "x": "2.0", "y": "3.25", "label": "1", "cluster": "0"},
    ]
