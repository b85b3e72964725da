"""Lloyd's k-means for pseudo-labeling embedding collections."""

from __future__ import annotations

import numpy as np

from .errors import ContractError
from .rng import generator
from .tensor import Tensor


def _as_matrix(embeddings) -> np.ndarray:
    rows = [e.data if isinstance(e, Tensor) else np.asarray(e, dtype=np.float64)
            for e in embeddings]
    dims = {r.shape for r in rows}
    if len(dims) != 1 or rows[0].ndim != 1:
        raise ContractError(f"embeddings must share one 1-D shape, got {sorted(dims)}")
    return np.stack(rows)


def kmeans_pseudolabels(embeddings, k: int, iters: int = 50, seed: int = 0) -> np.ndarray:
    """Cluster embeddings into k groups; returns labels in [0, k).

    Centroids start from k distinct points drawn uniformly. Assignment uses
    squared Euclidean distance with ties to the lowest index; a cluster
    that empties is re-seeded from the point currently farthest from its
    centroid. Stops when assignments stabilize or after `iters` rounds.
    """
    if k < 2:
        raise ContractError(f"k must be >= 2, got {k}")
    if iters < 1:
        raise ContractError(f"iters must be >= 1, got {iters}")
    x = _as_matrix(embeddings)
    n = x.shape[0]
    if n < k:
        raise ContractError(f"{n} points cannot form {k} clusters")
    rng = generator(seed, "kmeans-init")
    centroids = x[rng.choice(n, size=k, replace=False)].copy()
    labels = np.full(n, -1, dtype=np.int64)
    for _ in range(iters):
        d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_labels = d2.argmin(axis=1)
        dist_to_own = d2[np.arange(n), new_labels].copy()
        for cj in range(k):
            if not np.any(new_labels == cj):
                far = int(dist_to_own.argmax())
                centroids[cj] = x[far]
                new_labels[far] = cj
                dist_to_own[far] = -1.0
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for cj in range(k):
            centroids[cj] = x[labels == cj].mean(axis=0)
    return labels


def kmeans_inertia(embeddings, labels: np.ndarray) -> float:
    """Sum of squared distances to the per-cluster means."""
    x = _as_matrix(embeddings)
    total = 0.0
    for cj in np.unique(labels):
        pts = x[labels == cj]
        total += float(((pts - pts.mean(axis=0)) ** 2).sum())
    return total
