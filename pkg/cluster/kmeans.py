"""
k-means over style embeddings: k-means++ seeding, Lloyd iterations, seeded restarts.
"""

import logging
from collections import Counter

import numpy as np

from numcore.errors import DatasetError, NonFiniteError, PdsmError, ShapeError
from numcore.parallel import parallel_map
from numcore.rng import rng_derive

from .models import ClusterModel, LloydRun

logger = logging.getLogger(__name__)


def _as_points(points):
    rows = [getattr(p, 'vector', p) for p in points] if not isinstance(points, np.ndarray) else points
    array = np.asarray(rows, dtype=np.float64)
    if array.ndim != 2:
        raise ShapeError('rank', 2, array.ndim, 'kmeans points')
    return array


def squared_distances(points, centroids):
    """(n, k) squared Euclidean distances, computed directly (no expansion trick)."""
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum('nkd,nkd->nk', diff, diff)


def kmeans_plusplus(points, k, rng):
    """D^2-weighted seeding. Falls back to uniform draws once every point is covered."""
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    closest = squared_distances(points, points[chosen]).min(axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            index = int(rng.integers(n))
        else:
            cumulative = np.cumsum(closest)
            index = int(np.searchsorted(cumulative, rng.random() * total, side='right'))
            index = min(index, n - 1)
        chosen.append(index)
        closest = np.minimum(closest, squared_distances(points, points[[index]])[:, 0])
    return points[chosen].copy()


def _update_centroids(points, labels, centroids):
    """Cluster means; empty clusters take the point farthest from its own centroid."""
    k = centroids.shape[0]
    updated = centroids.copy()
    counts = np.bincount(labels, minlength=k)
    for j in range(k):
        if counts[j]:
            updated[j] = points[labels == j].mean(axis=0)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        spread = squared_distances(points, updated)[np.arange(points.shape[0]), labels]
        taken = set()
        for j in empty:
            for index in np.argsort(-spread, kind='stable'):
                if index not in taken:
                    taken.add(int(index))
                    updated[j] = points[index]
                    break
    return updated


def lloyd(points, centroids, max_iter, restart=0):
    """
    Alternate assignment and mean steps until assignments stop changing or
    max_iter mean steps have run. The trace records the inertia after every
    assignment step and is non-increasing.
    """
    distances = squared_distances(points, centroids)
    labels = np.argmin(distances, axis=1)
    inertia = float(distances[np.arange(len(points)), labels].sum())
    trace = [inertia]
    iterations = 0
    for iterations in range(1, max_iter + 1):
        centroids = _update_centroids(points, labels, centroids)
        distances = squared_distances(points, centroids)
        new_labels = np.argmin(distances, axis=1)
        inertia = float(distances[np.arange(len(points)), new_labels].sum())
        trace.append(inertia)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return LloydRun(restart, centroids, labels, inertia, iterations, tuple(trace))


def kmeans_fit(points, k, seed, max_iter=100, restarts=10, threads=1, on_iteration=None):
    """
    Fit k centroids; the restart with the lowest final inertia wins (ties go
    to the lower restart index). Restart r seeds from rng_derive(seed, r), so
    the result does not depend on threads.

    on_iteration(restart, iteration, inertia) is called for every trace entry
    once all restarts have finished.
    """
    points = _as_points(points)
    n = points.shape[0]
    if k < 1:
        raise PdsmError('k must be at least 1')
    if n < k:
        raise DatasetError(f'k-means needs at least k={k} points, got {n}')
    if max_iter < 1 or restarts < 1:
        raise PdsmError('max_iter and restarts must be at least 1')
    if not np.all(np.isfinite(points)):
        bad = sorted(set(np.argwhere(~np.isfinite(points))[:, 0].tolist()))
        raise NonFiniteError(f'non-finite embedding rows: {bad}')

    def run(restart):
        rng = rng_derive(seed, restart)
        return lloyd(points, kmeans_plusplus(points, k, rng), max_iter, restart=restart)

    runs = parallel_map(run, range(restarts), threads)
    for result in runs:
        logger.debug('restart %d: inertia %.6g after %d iterations', result.restart, result.inertia, result.iterations)
        if on_iteration is not None:
            for iteration, value in enumerate(result.trace):
                on_iteration(result.restart, iteration, value)
    best = min(runs, key=lambda r: (r.inertia, r.restart))
    logger.info('k-means k=%d over %d points: inertia %.6g (restart %d)', k, n, best.inertia, best.restart)
    return ClusterModel(k, best.centroids, max(best.inertia, 0.0), int(seed))


def assign(model, embedding):
    """Pseudo-domain index (0-based) of the nearest centroid; ties go to the lower index."""
    vector = np.asarray(getattr(embedding, 'vector', embedding), dtype=np.float64)
    if vector.shape != (model.dimension,):
        raise ShapeError('dimension', model.dimension, vector.shape[-1] if vector.ndim else 0, 'assign')
    distances = squared_distances(vector[None], model.centroids)[0]
    return int(np.argmin(distances))


def partition_dataset(dataset, model, embeddings):
    """
    Split a feature dataset into k subsets by the pseudo-domain of each image.

    embeddings maps image id -> StyleEmbedding. Subsets keep the input order
    and together cover the input exactly once.
    """
    missing = [item.image_id for item in dataset if item.image_id not in embeddings]
    if missing:
        raise DatasetError('missing style embedding for images', missing)
    members = [[] for _ in range(model.k)]
    for item in dataset:
        members[assign(model, embeddings[item.image_id])].append(item)
    return [dataset.with_items(items) for items in members]


def cluster_composition(domains, groups):
    """
    Contingency table {domain: {group: count}} between pseudo-domain indices
    and an external grouping such as site or vendor.
    """
    table = {}
    for domain, group in zip(domains, groups):
        table.setdefault(int(domain), Counter())[group] += 1
    return {domain: dict(sorted(counts.items())) for domain, counts in sorted(table.items())}
