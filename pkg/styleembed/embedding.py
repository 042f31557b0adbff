import logging

import numpy as np

from numcore.conv import conv2d_forward_batch
from numcore.errors import ShapeError
from numcore.models import Tensor3
from numcore.parallel import parallel_map

from .models import GramMatrix, StyleEmbedding

logger = logging.getLogger(__name__)

DEGENERATE_BLOCK_NORM = 1e-12


def style_forward(model, image):
    """Feature maps (conv + ReLU) of every selected layer, in ascending layer order."""
    if image.channels != model.in_channels:
        raise ShapeError('channels', model.in_channels, image.channels, 'style_forward')
    x = image.values[None]
    maps = []
    for number, layer in enumerate(model.layers, start=1):
        kernels = layer.kernels.astype(np.result_type(x, layer.kernels), copy=False)
        x = np.maximum(conv2d_forward_batch(x, kernels, stride=layer.stride), 0)
        if number in model.selected_layers:
            maps.append(Tensor3(x[0]))
        if number == model.selected_layers[-1]:
            break
    return maps


def gram_matrix(feature_map, layer=0):
    """
    G_ij = (1 / (H*W)) * sum over positions of F_i * F_j.

    Each entry sums its products in sorted order, which makes the result exactly
    invariant to any reordering of spatial positions and exactly symmetric.
    """
    channels = feature_map.channels
    positions = feature_map.height * feature_map.width
    if channels == 0 or positions == 0:
        raise ShapeError('size', 'non-empty', feature_map.shape, 'gram_matrix')
    flat = feature_map.values.reshape(channels, positions).astype(np.float64)
    products = np.sort(flat[:, None, :] * flat[None, :, :], axis=-1)
    return GramMatrix(layer, products.sum(axis=-1) / positions)


def gram_block(gram):
    """Upper triangle (diagonal included) in row-major order, L2-normalized."""
    rows, cols = np.triu_indices(gram.channels)
    block = gram.matrix[rows, cols]
    norm = np.linalg.norm(block)
    if norm < DEGENERATE_BLOCK_NORM:
        return np.zeros_like(block)
    return block / norm


def style_embedding(model, image):
    maps = style_forward(model, image)
    blocks = [
        gram_block(gram_matrix(feature_map, layer=number))
        for number, feature_map in zip(model.selected_layers, maps)
    ]
    return StyleEmbedding(np.concatenate(blocks), image_id=getattr(image, 'image_id', ''))


def embed_many(model, images, threads=1):
    """Embed a sequence of images; order of the result follows the input."""
    embeddings = parallel_map(lambda image: style_embedding(model, image), images, threads)
    logger.debug('embedded %d images (dimension %d)', len(embeddings), model.embedding_dimension)
    return embeddings
