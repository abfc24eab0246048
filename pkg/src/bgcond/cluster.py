"""Lloyd's K-Means with k-means++ seeding."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import TooFewPoints


def _sq_dists(points, centroids):
    return ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)


def _plusplus(points, K, rng):
    n = len(points)
    centroids = [points[rng.integers(n)]]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with a centroid; pick deterministically
            idx = int(np.argmax(d2))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids.append(points[idx])
        d2 = np.minimum(d2, ((points - points[idx]) ** 2).sum(axis=1))
    return np.array(centroids, dtype=np.float64)


def kmeans(points, K: int, seed=0, max_iter: int = 100, tol: float = 1e-6):
    """Return ``(assignments, centroids)``.

    Stops after ``max_iter`` iterations or once no centroid moves more than
    ``tol``.  A cluster that loses all members is re-seeded with the point
    farthest from its current centroid.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n < K:
        raise TooFewPoints(f"cannot form {K} clusters from {n} points")
    rng = np.random.default_rng(seed)
    centroids = _plusplus(points, K, rng)
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        d = _sq_dists(points, centroids)
        assign = np.argmin(d, axis=1)
        new = centroids.copy()
        for k in range(K):
            members = assign == k
            if members.any():
                new[k] = points[members].mean(axis=0)
        for k in range(K):
            if not (assign == k).any():
                far = int(np.argmax(np.min(_sq_dists(points, new), axis=1)))
                new[k] = points[far]
                assign[far] = k
        shift = np.sqrt(((new - centroids) ** 2).sum(axis=1)).max()
        centroids = new
        if shift < tol:
            break
    assign = np.argmin(_sq_dists(points, centroids), axis=1)
    return assign, centroids


def inertia(points, assign, centroids) -> float:
    points = np.asarray(points, dtype=np.float64)
    return float(((points - centroids[assign]) ** 2).sum())


class KMeans(ClusterMixin, BaseEstimator):
    def __init__(self, n_clusters=1, seed=0, max_iter=100, tol=1e-6):
        self.n_clusters = n_clusters
        self.seed = seed
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.labels_, self.cluster_centers_ = kmeans(X, self.n_clusters, self.seed, self.max_iter, self.tol)
        self.inertia_ = inertia(X, self.labels_, self.cluster_centers_)
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        X = check_array(X, dtype=np.float64)
        return np.argmin(_sq_dists(X, self.cluster_centers_), axis=1)
