from dataclasses import dataclass
from pathlib import Path

import numpy as np

from numcore.errors import PdsmError, ShapeError
from numcore.storage import read_json, read_tensor, write_json, write_tensor

ORTHONORMALITY_TOLERANCE = 1e-6


@dataclass(frozen=True, eq=False)
class PcaModel:
    """Centering mean, orthonormal component columns and their explained variances."""

    mean: np.ndarray
    components: np.ndarray
    variances: np.ndarray
    n_samples: int = 0

    def __post_init__(self):
        d, m = self.components.shape
        if self.mean.shape != (d,):
            raise ShapeError('length', d, self.mean.shape, 'PcaModel mean')
        if self.variances.shape != (m,):
            raise ShapeError('length', m, self.variances.shape, 'PcaModel variances')
        if np.any(self.variances < 0) or np.any(np.diff(self.variances) > 0):
            raise PdsmError('explained variances must be non-negative and descending')
        for array in (self.mean, self.components, self.variances):
            array.setflags(write=False)

    @property
    def m(self):
        return self.components.shape[1]

    @property
    def dimension(self):
        return self.components.shape[0]

    def orthonormality_error(self):
        gram = self.components.T @ self.components
        return float(np.max(np.abs(gram - np.eye(self.m)))) if self.m else 0.0

    def as_stored(self):
        """Copy rounded to float32, i.e. exactly what a reload returns."""
        return PcaModel(
            *(array.astype(np.float32).astype(np.float64) for array in (self.mean, self.components, self.variances)),
            n_samples=self.n_samples,
        )


@dataclass(frozen=True, eq=False)
class ReducedFeature:
    """z: one image's feature vector in PCA coordinates."""

    values: np.ndarray
    image_id: str = ''
    week: int = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise PdsmError(f'reduced feature for {self.image_id or "image"} is not finite')


def save_pca_model(model, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_tensor(directory / 'mean.tns', model.mean)
    write_tensor(directory / 'components.tns', model.components)
    write_tensor(directory / 'variances.tns', model.variances)
    write_json(directory / 'pca.json', {
        'components': model.m,
        'dimension': model.dimension,
        'n_samples': model.n_samples,
    })


def load_pca_model(directory):
    directory = Path(directory)
    meta = read_json(directory / 'pca.json')
    model = PcaModel(
        read_tensor(directory / 'mean.tns').astype(np.float64),
        read_tensor(directory / 'components.tns').astype(np.float64),
        read_tensor(directory / 'variances.tns').astype(np.float64),
        n_samples=int(meta['n_samples']),
    )
    if model.m != int(meta['components']):
        raise PdsmError(f"{directory}: manifest says {meta['components']} components, found {model.m}")
    return model
