"""Agglomerative clustering of tile embeddings in L2 space.

The merge loop uses the Lance-Williams recurrence on a dense distance
matrix. Each active cluster occupies the slot of its smallest member row,
and every row caches its nearest neighbour among higher slots, so a merge
step costs O(N) plus a rescan for the rows whose cached neighbour was one of
the merged pair. Ties between candidate merges resolve to the smallest
(row, column) slot pair.
"""

import dataclasses

import numpy as np
from scipy.spatial.distance import cdist
from sklearn.base import BaseEstimator, ClusterMixin

from ._validation import check_budget, check_embeddings
from .exceptions import PreconditionError

LINKAGES = ("ward", "complete", "average", "single")


@dataclasses.dataclass
class ClusterAssignment:
    labels: np.ndarray
    k: int
    linkage: str

    def members(self):
        """List of row-index arrays, one per cluster label."""
        return [np.flatnonzero(self.labels == c) for c in range(self.k)]


def _lance_williams(linkage, d_am, d_bm, d_ab, n_a, n_b, n_m):
    if linkage == "single":
        return np.minimum(d_am, d_bm)
    if linkage == "complete":
        return np.maximum(d_am, d_bm)
    if linkage == "average":
        return (n_a * d_am + n_b * d_bm) / (n_a + n_b)
    # ward on squared distances; values are twice the SSE increment
    total = n_a + n_b + n_m
    return ((n_a + n_m) * d_am + (n_b + n_m) * d_bm - n_m * d_ab) / total


def first_occurrence_labels(roots):
    """Relabel cluster roots 0..k-1 in order of first appearance."""
    _, first, inverse = np.unique(roots, return_index=True, return_inverse=True)
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(len(first))
    return rank[inverse.reshape(-1)]


def agglomerative_cluster(embeddings, k, linkage="ward"):
    """Bottom-up clustering of ``embeddings`` into exactly ``k`` groups.

    Parameters
    ----------
    embeddings : array-like of shape (n, c)
    k : int
        Number of clusters, ``1 <= k <= n``.
    linkage : {"ward", "complete", "average", "single"}, default="ward"

    Returns
    -------
    ClusterAssignment
        Labels are numbered by first occurrence when scanning rows in order.
    """
    if linkage not in LINKAGES:
        raise PreconditionError(f"unknown linkage {linkage!r}; choose from {LINKAGES}")
    X = check_embeddings(embeddings)
    n = X.shape[0]
    if n == 0:
        raise PreconditionError("cannot cluster an empty set")
    k = check_budget(k, n, "k")
    if k == n:
        return ClusterAssignment(np.arange(n), k, linkage)

    metric = "sqeuclidean" if linkage == "ward" else "euclidean"
    D = cdist(X, X, metric=metric)
    np.fill_diagonal(D, np.inf)
    size = np.ones(n)
    active = np.ones(n, dtype=bool)
    owner = np.arange(n)

    # nearest neighbour of each row among slots j > i
    nn_dist = np.full(n, np.inf)
    nn_idx = np.full(n, -1)

    def rescan(i):
        if i + 1 >= n:
            nn_dist[i], nn_idx[i] = np.inf, -1
            return
        row = D[i, i + 1:]
        j = int(np.argmin(row))
        nn_dist[i], nn_idx[i] = row[j], i + 1 + j

    for i in range(n):
        rescan(i)

    for _ in range(n - k):
        a = int(np.argmin(nn_dist))
        b = int(nn_idx[a])
        d_ab = D[a, b]

        others = active.copy()
        others[[a, b]] = False
        m = np.flatnonzero(others)
        new = _lance_williams(linkage, D[a, m], D[b, m], d_ab, size[a], size[b], size[m])
        D[a, m] = new
        D[m, a] = new
        D[b, :] = np.inf
        D[:, b] = np.inf
        active[b] = False
        size[a] += size[b]
        owner[owner == b] = a
        nn_dist[b], nn_idx[b] = np.inf, -1

        rescan(a)
        for i in m:
            if i > b:
                break
            if nn_idx[i] == a or nn_idx[i] == b:
                rescan(i)
            elif i < a:
                d = D[i, a]
                if d < nn_dist[i] or (d == nn_dist[i] and a < nn_idx[i]):
                    nn_dist[i], nn_idx[i] = d, a

    return ClusterAssignment(first_occurrence_labels(owner), k, linkage)


class AgglomerativeClusterer(ClusterMixin, BaseEstimator):
    """Estimator wrapper around :func:`agglomerative_cluster`.

    Parameters
    ----------
    n_clusters : int, default=2
    linkage : {"ward", "complete", "average", "single"}, default="ward"

    Attributes
    ----------
    labels_ : ndarray of shape (n_samples,)
    """

    def __init__(self, n_clusters=2, linkage="ward"):
        self.n_clusters = n_clusters
        self.linkage = linkage

    def fit(self, X, y=None):
        result = agglomerative_cluster(X, self.n_clusters, self.linkage)
        self.labels_ = result.labels
        self.n_features_in_ = np.asarray(X).reshape(len(X), -1).shape[1]
        return self
