"""k-means fitting, assignment tie-breaks, and the brute-force optimum check."""

import itertools

import numpy as np
import pytest

from glyrl.cluster import (
    ClusterModel,
    assign,
    assign_many,
    kmeans_fit,
    load_clusters,
    save_clusters,
)
from glyrl.errors import ArtifactError


def brute_force_inertia(points, k):
    """Global optimum over every assignment of n points to k groups."""
    n = len(points)
    best = np.inf
    for labels in itertools.product(range(k), repeat=n):
        labels = np.asarray(labels)
        total = 0.0
        for j in range(k):
            members = points[labels == j]
            if len(members):
                c = members.mean(axis=0)
                total += ((members - c) ** 2).sum()
        best = min(best, total)
    return best


def test_three_points_three_clusters_exact_cover():
    pts = np.array([[0.0, 0.0], [5.0, 1.0], [2.0, 9.0]])
    model = kmeans_fit(pts, k=3, seed=0)
    assert model.inertia == 0.0
    assert sorted(map(tuple, model.centroids.tolist())) == sorted(map(tuple, pts.tolist()))


def test_two_well_separated_pairs():
    pts = np.array([[0.0], [1.0], [10.0], [11.0]])
    model = kmeans_fit(pts, k=2, seed=3)
    got = sorted(model.centroids.ravel().tolist())
    assert got == [0.5, 10.5]
    assert model.inertia == pytest.approx(1.0, abs=1e-12)
    # brute force over all 2-partitions confirms 1.0 is the optimum
    assert brute_force_inertia(pts, 2) == pytest.approx(1.0, abs=1e-12)


def test_fit_deterministic_bitwise():
    rng = np.random.default_rng(12)
    pts = rng.uniform(size=(40, 3))
    a = kmeans_fit(pts, k=5, seed=99)
    b = kmeans_fit(pts, k=5, seed=99)
    assert np.array_equal(a.centroids, b.centroids)
    assert a.inertia == b.inertia
    assert a.inertia_history == b.inertia_history
    assert np.array_equal(a.labels, b.labels)


def test_different_seeds_can_differ_but_stay_valid():
    rng = np.random.default_rng(5)
    pts = rng.uniform(size=(30, 2))
    for seed in range(4):
        model = kmeans_fit(pts, k=4, seed=seed)
        model.validate()
        assert model.labels.min() >= 0 and model.labels.max() < 4


def test_inertia_history_non_increasing():
    rng = np.random.default_rng(8)
    for seed in range(6):
        pts = rng.uniform(size=(60, 4))
        model = kmeans_fit(pts, k=6, seed=seed)
        hist = model.inertia_history
        assert len(hist) >= 2
        assert all(hist[i + 1] <= hist[i] + 1e-12 for i in range(len(hist) - 1))
        assert model.inertia == hist[-1]


def test_tiny_instances_reach_global_optimum():
    rng = np.random.default_rng(2024)
    for trial in range(20):
        n = int(rng.integers(3, 9))
        k = int(rng.integers(2, min(4, n + 1)))
        dim = int(rng.integers(1, 3))
        pts = rng.uniform(-5.0, 5.0, size=(n, dim))
        target = brute_force_inertia(pts, k)
        fitted = min(kmeans_fit(pts, k=k, seed=s).inertia for s in range(8))
        assert fitted <= target + 1e-9, \
            "trial %d: fitted %r vs optimum %r" % (trial, fitted, target)


def test_assign_centroid_to_itself():
    rng = np.random.default_rng(77)
    model = kmeans_fit(rng.uniform(size=(50, 3)), k=8, seed=1)
    for j in range(model.k):
        assert assign(model.centroids[j], model) == j


def test_assign_tie_breaks_to_lowest_index():
    centroids = np.array([[10.0], [20.0], [1.0], [30.0], [40.0], [3.0]])
    model = ClusterModel(centroids, 6, 1, 0.0, 0)
    # 2.0 is exactly 1 away from centroids 2 and 5
    assert assign(np.array([2.0]), model) == 2


def test_assign_hand_checked_distance():
    model = ClusterModel(np.array([[0.5], [10.5]]), 2, 1, 0.0, 0)
    assert assign(np.array([3.0]), model) == 0


def test_assign_rejects_wrong_dim():
    model = ClusterModel(np.zeros((2, 3)), 2, 3, 0.0, 0)
    with pytest.raises(ValueError):
        assign(np.zeros(2), model)
    with pytest.raises(ValueError):
        assign_many(np.zeros((4, 2)), model)


def test_assign_after_fit_reproduces_training_labels():
    rng = np.random.default_rng(41)
    pts = rng.uniform(size=(80, 3))
    model = kmeans_fit(pts, k=7, seed=2)
    assert np.array_equal(assign_many(pts, model), model.labels)


def test_fit_rejects_bad_inputs():
    with pytest.raises(ValueError):
        kmeans_fit(np.zeros((2, 2)), k=3, seed=0)  # fewer points than k
    with pytest.raises(ValueError):
        kmeans_fit(np.array([[0.0], [np.nan]]), k=1, seed=0)
    with pytest.raises(ValueError):
        kmeans_fit(np.zeros((0, 2)), k=1, seed=0)


def test_duplicate_points_fit_cleanly():
    pts = np.array([[1.0, 1.0]] * 6 + [[4.0, 4.0]] * 2)
    model = kmeans_fit(pts, k=3, seed=0)
    assert model.inertia == pytest.approx(0.0, abs=1e-18)


def test_empty_cluster_repair_keeps_k_centroids():
    # 3 tight groups but k=4 forces one seed to go empty at some point for
    # some seeds; the model must still come back with 4 finite centroids.
    rng = np.random.default_rng(10)
    groups = [rng.normal(c, 0.01, size=(10, 2)) for c in (0.0, 5.0, 10.0)]
    pts = np.vstack(groups)
    for seed in range(6):
        model = kmeans_fit(pts, k=4, seed=seed)
        assert model.centroids.shape == (4, 2)
        assert np.all(np.isfinite(model.centroids))


def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    model = kmeans_fit(rng.uniform(size=(30, 4)), k=5, seed=11)
    path = str(tmp_path / "clusters.model")
    save_clusters(path, model)
    loaded = load_clusters(path)
    assert np.array_equal(model.centroids, loaded.centroids)
    assert (loaded.k, loaded.dim, loaded.seed) == (5, 4, 11)
    assert loaded.inertia == model.inertia
    pts = rng.uniform(size=(9, 4))
    assert np.array_equal(assign_many(pts, model), assign_many(pts, loaded))


def test_load_rejects_foreign_file(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"format": "glyrl-encoder", "version": 1}\n')
    with pytest.raises(ArtifactError):
        load_clusters(str(path))
    path.write_text("not json at all")
    with pytest.raises(ArtifactError):
        load_clusters(str(path))
