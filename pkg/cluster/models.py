from dataclasses import dataclass
from pathlib import Path

import numpy as np

from numcore.errors import PdsmError
from numcore.storage import read_json, read_tensor, write_json, write_tensor


@dataclass(frozen=True, eq=False)
class ClusterModel:
    """Fitted k-means: k centroids in style-embedding space."""

    k: int
    centroids: np.ndarray
    inertia: float
    seed: int

    def __post_init__(self):
        if self.k < 1:
            raise PdsmError('k must be at least 1')
        if self.centroids.shape[0] != self.k:
            raise PdsmError(f'expected {self.k} centroids, got {self.centroids.shape[0]}')
        if self.inertia < 0:
            raise PdsmError('inertia must be non-negative')
        self.centroids.setflags(write=False)

    @property
    def dimension(self):
        return self.centroids.shape[1]

    def as_stored(self):
        """Copy with centroids rounded to float32, i.e. exactly what a reload returns."""
        centroids = self.centroids.astype(np.float32).astype(np.float64)
        return ClusterModel(self.k, centroids, self.inertia, self.seed)


@dataclass(frozen=True)
class LloydRun:
    """Outcome of one seeded restart."""

    restart: int
    centroids: np.ndarray
    labels: np.ndarray
    inertia: float
    iterations: int
    trace: tuple


def save_cluster_model(model, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_tensor(directory / 'centroids.tns', model.centroids)
    write_json(directory / 'cluster.json', {'k': model.k, 'seed': model.seed, 'inertia': model.inertia})


def load_cluster_model(directory):
    directory = Path(directory)
    meta = read_json(directory / 'cluster.json')
    centroids = read_tensor(directory / 'centroids.tns').astype(np.float64)
    return ClusterModel(int(meta['k']), centroids, float(meta['inertia']), int(meta['seed']))
