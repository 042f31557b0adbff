"""Principal component analysis of penultimate-layer features."""

import logging

import numpy as np

from numcore.errors import DatasetError, ShapeError, check_finite
from numcore.linalg import sym_eig

from .models import PcaModel, ReducedFeature

logger = logging.getLogger(__name__)

DEFAULT_COMPONENTS = 32


def _rows(features):
    if isinstance(features, np.ndarray):
        rows = features
    else:
        rows = [getattr(f, 'values', f) for f in features]
    array = np.asarray(rows, dtype=np.float64)
    if array.ndim != 2:
        raise ShapeError('rank', 2, array.ndim, 'pca rows')
    return array


def pca_fit(features, requested_components=DEFAULT_COMPONENTS):
    """
    Fit PCA on n feature rows.

    m = min(requested, n - 1, d): the sample covariance (divisor n - 1) has
    rank at most n - 1, so no zero-variance directions are invented.
    """
    x = _rows(features)
    n, d = x.shape
    if n < 2:
        raise DatasetError(f'PCA needs at least 2 rows, got {n}')
    if requested_components < 1:
        raise ValueError('requested_components must be >= 1')
    check_finite(x, 'PCA rows')

    mean = x.mean(axis=0)
    centered = x - mean
    covariance = centered.T @ centered / (n - 1)
    covariance = 0.5 * (covariance + covariance.T)
    eigenvalues, eigenvectors = sym_eig(covariance)

    m = min(requested_components, n - 1, d)
    variances = np.maximum(eigenvalues[:m], 0.0)
    model = PcaModel(mean, np.ascontiguousarray(eigenvectors[:, :m]), variances, n_samples=n)
    logger.info(
        'PCA on %d rows: %d -> %d components, %.1f%% of variance retained',
        n, d, m, 100.0 * variances.sum() / max(float(np.trace(covariance)), 1e-300),
    )
    return model


def _check_dimension(model, values):
    if values.shape[-1] != model.dimension:
        raise ShapeError('length', model.dimension, values.shape[-1], 'pca_transform')


def pca_transform(model, feature, week=None):
    """z = C^T (f - mean)."""
    values = np.asarray(getattr(feature, 'values', feature), dtype=np.float64)
    if values.ndim != 1:
        raise ShapeError('rank', 1, values.ndim, 'pca_transform')
    _check_dimension(model, values)
    return ReducedFeature(model.components.T @ (values - model.mean), image_id=getattr(feature, 'image_id', ''), week=week)


def pca_transform_many(model, rows):
    """(n, d) rows -> (n, m) coordinates."""
    x = _rows(rows)
    _check_dimension(model, x)
    return (x - model.mean) @ model.components


def pca_inverse(model, z):
    """Inverse projection C z + mean."""
    values = np.asarray(getattr(z, 'values', z), dtype=np.float64)
    if values.shape[-1] != model.m:
        raise ShapeError('length', model.m, values.shape[-1], 'pca_inverse')
    return values @ model.components.T + model.mean
