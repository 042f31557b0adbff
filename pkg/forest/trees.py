"""
CART regression trees and random-forest bagging.

Splits maximize variance reduction over midpoints (rounded to float32)
between consecutive distinct values of each candidate feature; ties go to the lower feature
index, then the lower threshold.
"""

import logging

import numpy as np

from numcore.errors import DatasetError, ShapeError, check_finite
from numcore.parallel import parallel_map
from numcore.rng import rng_derive

from .models import LEAF, ForestHyper, ForestModel, RegressionTree

logger = logging.getLogger(__name__)


def as_stored(values):
    """Round to the nearest float32, the precision reduced features and node records keep."""
    return np.asarray(values, dtype=np.float64).astype(np.float32).astype(np.float64)


def split_thresholds(low, high):
    """
    Float32 thresholds t with low <= t < high: the rounded midpoint, else the
    smallest float32 >= low. Pairs no float32 separates get NaN.
    """
    with np.errstate(over='ignore'):
        threshold = as_stored(0.5 * (low + high))
        ceiling = np.asarray(low, dtype=np.float32)
        ceiling = np.where(ceiling < low, np.nextafter(ceiling, np.float32(np.inf)), ceiling).astype(np.float64)
    threshold = np.where((low <= threshold) & (threshold < high), threshold, ceiling)
    return np.where((low <= threshold) & (threshold < high), threshold, np.nan)


def best_split(x, y, features, min_samples_leaf=1):
    """
    Best (feature, threshold, reduction) for one node, or None when no
    candidate keeps min_samples_leaf rows on both sides with positive reduction.

    reduction = SSE(node) - SSE(left) - SSE(right).
    """
    n = len(y)
    centered = y - y.mean()
    parent_sse = float(centered @ centered)
    best = None
    for feature in sorted(features):
        order = np.argsort(x[:, feature], kind='stable')
        xs = x[order, feature]
        ys = centered[order]
        left_count = np.arange(1, n)
        left_sum = np.cumsum(ys)[:-1]
        left_sq = np.cumsum(ys * ys)[:-1]
        right_count = n - left_count
        right_sum = -left_sum
        right_sq = parent_sse - left_sq
        sse = (left_sq - left_sum ** 2 / left_count) + (right_sq - right_sum ** 2 / right_count)
        thresholds = split_thresholds(xs[:-1], xs[1:])
        valid = (
            ~np.isnan(thresholds)
            & (left_count >= min_samples_leaf)
            & (right_count >= min_samples_leaf)
        )
        if not np.any(valid):
            continue
        reduction = np.where(valid, parent_sse - sse, -np.inf)
        position = int(np.argmax(reduction))
        gain = float(reduction[position])
        if gain <= 0.0 or (best is not None and gain <= best[2]):
            continue
        best = (feature, float(thresholds[position]), gain)
    return best


def build_tree(x, y, hyper, rng):
    """Grow one tree depth-first (left child first) from the rows it was given."""
    p = x.shape[1]
    n_features = hyper.features_for(p)
    feature, threshold, left, right, value, count = [], [], [], [], [], []

    def new_node(indices):
        feature.append(LEAF)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(float(as_stored(np.mean(y[indices]))))
        count.append(len(indices))
        return len(feature) - 1

    stack = [(new_node(np.arange(len(y))), np.arange(len(y)), 0)]
    while stack:
        node, indices, depth = stack.pop()
        ys = y[indices]
        if len(indices) < 2 * hyper.min_samples_leaf or np.all(ys == ys[0]):
            continue
        if hyper.max_depth and depth >= hyper.max_depth:
            continue
        candidates = rng.generator.choice(p, size=n_features, replace=False) if n_features < p else np.arange(p)
        split = best_split(x[indices], ys, candidates, hyper.min_samples_leaf)
        if split is None:
            continue
        split_feature, split_threshold, _ = split
        goes_left = x[indices, split_feature] <= split_threshold
        left_rows, right_rows = indices[goes_left], indices[~goes_left]
        feature[node] = split_feature
        threshold[node] = split_threshold
        left[node] = new_node(left_rows)
        right[node] = new_node(right_rows)
        stack.append((right[node], right_rows, depth + 1))
        stack.append((left[node], left_rows, depth + 1))

    return RegressionTree(
        feature=np.array(feature, dtype=np.int64),
        threshold=np.array(threshold, dtype=np.float64),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        value=np.array(value, dtype=np.float64),
        count=np.array(count, dtype=np.int64),
    )


def _inputs(z, y):
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if z.ndim != 2:
        raise ShapeError('rank', 2, z.ndim, 'rf_fit inputs')
    if z.shape[0] != y.shape[0]:
        raise ShapeError('rows', z.shape[0], y.shape[0], 'rf_fit targets')
    if z.shape[0] < 2:
        raise DatasetError(f'a forest needs at least 2 rows, got {z.shape[0]}')
    if z.shape[1] < 1:
        raise ShapeError('columns', '>= 1', 0, 'rf_fit inputs')
    check_finite(z, 'forest inputs')
    check_finite(y, 'forest targets')
    return z, y


def rf_fit(z, y, hyper=None, seed=0, threads=1):
    """
    Fit a random forest. Tree t draws its bootstrap sample and its per-node
    feature subsets from stream rng_derive(seed, t).
    """
    hyper = hyper or ForestHyper()
    z, y = _inputs(z, y)
    n = len(y)

    def grow(index):
        rng = rng_derive(seed, index)
        rows = rng.integers(0, n, size=n) if hyper.bootstrap else np.arange(n)
        return build_tree(z[rows], y[rows], hyper, rng)

    trees = parallel_map(grow, range(hyper.n_trees), threads)
    logger.info(
        'forest: %d trees on %d rows x %d features (%d leaves on average)',
        hyper.n_trees, n, z.shape[1], round(np.mean([tree.n_leaves for tree in trees])),
    )
    return ForestModel(trees=trees, hyper=hyper, seed=seed, input_dimension=z.shape[1])


def rf_predict_many(model, rows):
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[1] != model.input_dimension:
        raise ShapeError('length', model.input_dimension, rows.shape[-1], 'rf_predict')
    total = np.zeros(len(rows))
    for tree in model.trees:
        total += tree.predict_many(rows)
    return total / len(model.trees)


def rf_predict(model, z):
    """Mean of the per-tree leaf means for one p-vector."""
    z = np.asarray(getattr(z, 'values', z), dtype=np.float64)
    if z.ndim != 1:
        raise ShapeError('rank', 1, z.ndim, 'rf_predict')
    return float(rf_predict_many(model, z[None, :])[0])
