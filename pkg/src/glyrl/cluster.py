"""k-means state abstraction over raw or encoded patient-state vectors.

Plain Lloyd's algorithm with k-means++ seeding, written against numpy only so
the tie-breaking and determinism contracts stay inspectable: nearest-centroid
ties resolve to the lowest index, empty clusters are re-seeded to the point
farthest from its current centroid, and the whole fit is a pure function of
(points, k, seed).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import ArtifactError

DEFAULT_K = 500
DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITERS = 300

CLUSTER_FORMAT = "glyrl-clusters"
CLUSTER_FORMAT_VERSION = 1

# Distances are computed by explicit (x - c)^2 broadcasting, chunked so
# peak memory stays near this many float64 scratch elements.  The expanded
# ||x||^2 - 2xc + ||c||^2 form would be faster but its rounding can break
# exact-tie reproducibility.
_CHUNK_ELEMENTS = 1 << 24


@dataclass
class ClusterModel:
    centroids: np.ndarray  # (k, dim)
    k: int
    dim: int
    inertia: float
    seed: int
    inertia_history: List[float] = field(default_factory=list)
    labels: Optional[np.ndarray] = None  # final assignment of the fit points

    def validate(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.centroids.shape != (self.k, self.dim):
            raise ValueError("centroids shaped %r, expected %r"
                             % (self.centroids.shape, (self.k, self.dim)))
        if not np.all(np.isfinite(self.centroids)):
            raise ValueError("centroids contain non-finite values")


def _check_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ValueError("points must be a non-empty (n, dim) matrix")
    if not np.all(np.isfinite(pts)):
        raise ValueError("points contain non-finite values")
    return pts


def _nearest(points: np.ndarray, centroids: np.ndarray):
    """Labels and squared distances to each point's nearest centroid."""
    n, dim = points.shape
    k = centroids.shape[0]
    labels = np.empty(n, dtype=np.int64)
    best = np.empty(n, dtype=float)
    step = max(1, _CHUNK_ELEMENTS // max(1, k * dim))
    for start in range(0, n, step):
        block = points[start:start + step]
        d2 = ((block[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        labels[start:start + step] = np.argmin(d2, axis=1)  # ties -> lowest
        best[start:start + step] = d2[np.arange(len(block)), labels[start:start + step]]
    return labels, best


def _seed_plus_plus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = rng.integers(n)
    d2 = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # all remaining mass on already-covered points (duplicates)
            chosen[j] = rng.integers(n)
        else:
            chosen[j] = rng.choice(n, p=d2 / total)
        d2 = np.minimum(d2, ((points - points[chosen[j]]) ** 2).sum(axis=1))
    return points[chosen].copy()


def kmeans_fit(points, k: int, seed: int = 0,
               max_iters: int = DEFAULT_MAX_ITERS,
               tol: float = DEFAULT_TOL) -> ClusterModel:
    """Lloyd's algorithm with k-means++ seeding.

    Stops when the largest centroid movement falls below tol or after
    max_iters update rounds; inertia is recorded after every assignment
    pass and is non-increasing.  Empty clusters are re-seeded to the point
    currently farthest from its centroid.
    """
    pts = _check_points(points)
    n, dim = pts.shape
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < k:
        raise ValueError("need at least k=%d points, got %d" % (k, n))
    if max_iters < 0 or tol < 0:
        raise ValueError("max_iters and tol must be non-negative")

    rng = np.random.default_rng(seed)
    centroids = _seed_plus_plus(pts, k, rng)
    history: List[float] = []

    for _ in range(max_iters):
        labels, d2 = _nearest(pts, centroids)
        history.append(float(d2.sum()))

        new_centroids = centroids.copy()
        counts = np.bincount(labels, minlength=k)
        for j in range(k):
            if counts[j] > 0:
                new_centroids[j] = pts[labels == j].mean(axis=0)
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            steal = d2.copy()
            for j in empty:
                far = int(np.argmax(steal))
                new_centroids[j] = pts[far]
                steal[far] = -np.inf  # each empty cluster takes a distinct point
        movement = float(np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max())
        centroids = new_centroids
        if movement < tol:
            break

    labels, d2 = _nearest(pts, centroids)
    inertia = float(d2.sum())
    history.append(inertia)
    model = ClusterModel(centroids, k, dim, inertia, seed,
                         inertia_history=history, labels=labels)
    model.validate()
    return model


def assign(point, model: ClusterModel) -> int:
    """Index of the nearest centroid (squared Euclidean, ties -> lowest)."""
    p = np.asarray(point, dtype=float)
    if p.shape != (model.dim,):
        raise ValueError("expected a vector of length %d, got shape %r"
                         % (model.dim, p.shape))
    labels, _ = _nearest(p[None, :], model.centroids)
    return int(labels[0])


def assign_many(points, model: ClusterModel) -> np.ndarray:
    pts = _check_points(points)
    if pts.shape[1] != model.dim:
        raise ValueError("expected vectors of length %d, got %d"
                         % (model.dim, pts.shape[1]))
    labels, _ = _nearest(pts, model.centroids)
    return labels


def save_clusters(path: str, model: ClusterModel) -> None:
    model.validate()
    doc = {
        "format": CLUSTER_FORMAT,
        "version": CLUSTER_FORMAT_VERSION,
        "k": model.k,
        "dim": model.dim,
        "seed": model.seed,
        "inertia": model.inertia,
        "centroids": model.centroids.tolist(),
    }
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
    os.replace(tmp, path)


def load_clusters(path: str) -> ClusterModel:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ArtifactError("cannot read cluster model %s: %s" % (path, exc))
    if doc.get("format") != CLUSTER_FORMAT:
        raise ArtifactError("%s is not a cluster model file" % path)
    if doc.get("version") != CLUSTER_FORMAT_VERSION:
        raise ArtifactError("unsupported cluster model version %r" % (doc.get("version"),))
    try:
        model = ClusterModel(
            np.array(doc["centroids"], dtype=float),
            int(doc["k"]),
            int(doc["dim"]),
            float(doc["inertia"]),
            int(doc["seed"]),
        )
        model.validate()
    except (KeyError, TypeError, ValueError) as exc:
        raise ArtifactError("malformed cluster model %s: %s" % (path, exc))
    return model
