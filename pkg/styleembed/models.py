"""Style model, Gram matrices and style embeddings."""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from numcore.errors import PdsmError, ShapeError, check_finite
from numcore.models import STANDARD_DTYPE
from numcore.rng import rng_for
from numcore.storage import read_json, read_tensor, write_json, write_tensor

# (output channels, kernel size, stride) per layer of the default fixed filter bank
DEFAULT_STYLE_LAYERS = ((8, 5, 2), (16, 3, 2))
DEFAULT_SELECTED_LAYERS = (1, 2)

MANIFEST_NAME = 'manifest.json'


@dataclass(frozen=True, eq=False)
class StyleLayer:
    """One bias-free convolution of the style model."""

    kernels: np.ndarray
    stride: int

    @property
    def out_channels(self):
        return self.kernels.shape[0]

    @property
    def in_channels(self):
        return self.kernels.shape[1]


@dataclass(frozen=True, eq=False)
class StyleModel:
    """
    Fixed convolutional layers plus the selected layer set used for Gram matrices.

    selected_layers holds 1-based layer numbers. Weights are read-only once
    the model is built.
    """

    layers: tuple
    selected_layers: tuple = DEFAULT_SELECTED_LAYERS
    provenance: str = ''

    def __post_init__(self):
        if not self.layers:
            raise PdsmError('style model needs at least one layer')
        if not self.selected_layers:
            raise PdsmError('selected layer set must not be empty')
        for number in self.selected_layers:
            if not 1 <= number <= len(self.layers):
                raise PdsmError(f'selected layer {number} outside 1..{len(self.layers)}')
        object.__setattr__(self, 'selected_layers', tuple(sorted(set(int(n) for n in self.selected_layers))))
        for previous, layer in zip(self.layers, self.layers[1:]):
            if layer.in_channels != previous.out_channels:
                raise ShapeError('channels', previous.out_channels, layer.in_channels, 'StyleModel')
        for layer in self.layers:
            check_finite(layer.kernels, 'style kernels')
            layer.kernels.setflags(write=False)

    @property
    def in_channels(self):
        return self.layers[0].in_channels

    @property
    def embedding_dimension(self):
        """Sum of C(C+1)/2 over the selected layers; independent of image size."""
        total = 0
        for number in self.selected_layers:
            c = self.layers[number - 1].out_channels
            total += c * (c + 1) // 2
        return total

    @classmethod
    def random(cls, seed, in_channels, architecture=DEFAULT_STYLE_LAYERS, selected_layers=DEFAULT_SELECTED_LAYERS):
        """Seeded, bias-free random filter bank (He-normal scale)."""
        layers = []
        channels = in_channels
        for index, (out_channels, size, stride) in enumerate(architecture, start=1):
            rng = rng_for(seed, 'style-layer', index)
            scale = np.sqrt(2.0 / (channels * size * size))
            kernels = rng.normal(0.0, scale, size=(out_channels, channels, size, size)).astype(STANDARD_DTYPE)
            layers.append(StyleLayer(kernels, stride))
            channels = out_channels
        return cls(tuple(layers), tuple(selected_layers), provenance=f'random-seed:{seed}')


@dataclass(frozen=True, eq=False)
class GramMatrix:
    layer: int
    matrix: np.ndarray

    @property
    def channels(self):
        return self.matrix.shape[0]


@dataclass(frozen=True, eq=False)
class StyleEmbedding:
    vector: np.ndarray
    image_id: str = ''

    @property
    def dimension(self):
        return self.vector.shape[0]


def save_style_model(model, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for index, layer in enumerate(model.layers, start=1):
        name = f'layer_{index}.tns'
        write_tensor(directory / name, layer.kernels)
        entries.append({'file': name, 'stride': layer.stride, 'shape': list(layer.kernels.shape)})
    write_json(directory / MANIFEST_NAME, {
        'layers': entries,
        'selected_layers': list(model.selected_layers),
        'provenance': model.provenance,
    })


def load_style_model(directory, selected_layers=None):
    """Load weights from a manifest directory; selected_layers overrides the stored set."""
    directory = Path(directory)
    manifest = read_json(directory / MANIFEST_NAME)
    layers = tuple(
        StyleLayer(read_tensor(directory / entry['file']), int(entry['stride']))
        for entry in manifest['layers']
    )
    chosen = selected_layers or manifest['selected_layers']
    provenance = manifest.get('provenance') or f'weights:{directory.name}'
    return StyleModel(layers, tuple(chosen), provenance=provenance)
