"""Pre-training, fine-tuning, qSteatosis prediction and penultimate-layer feature extraction."""

import logging
from dataclasses import replace

import numpy as np

from numcore.errors import DatasetError, DivergenceError, ShapeError
from numcore.rng import rng_for

from .layers import backward, forward, mse_loss
from .models import (
    LINEAGE_FINETUNED, LINEAGE_PRETRAINED, Architecture, FeatureVector, TaskNetwork, initial_params,
)

logger = logging.getLogger(__name__)

MIN_FINETUNE_SAMPLES = 4
INFERENCE_BATCH = 16
STD_FLOOR = 1e-12


def _stack(dataset, dtype):
    """Images and raw targets in canonical (image id) order, independent of storage order."""
    items = sorted(dataset, key=lambda item: item.image_id)
    images = np.stack([item.load().values for item in items]).astype(dtype, copy=False)
    targets = np.array([item.target for item in items], dtype=np.float64)
    return images, targets


def _run_sgd(network, images, targets, config):
    """
    Mini-batch SGD with momentum on MSE in standardized target units.

    Batch order for epoch e comes from the stream ('shuffle', e) of the config
    seed. Weight decay applies to weight tensors only. Returns the trained
    parameters and the last epoch's mean loss.
    """
    params = network.copy_params()
    velocity = {name: np.zeros_like(value) for name, value in params.items()}
    dtype = network.dtype
    scaled = ((targets - network.target_mean) / network.target_std).astype(dtype)
    lr = dtype.type(config.learning_rate)
    momentum = dtype.type(config.momentum)
    decay = dtype.type(config.weight_decay)
    n = len(scaled)
    epoch_loss = float('nan')

    for epoch in range(1, config.epochs + 1):
        order = rng_for(config.seed, 'shuffle', epoch).permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            outputs, _, cache = forward(params, network.architecture, images[batch], keep_cache=True)
            loss, grad_outputs = mse_loss(outputs, scaled[batch])
            total += loss * len(batch)
            grads = backward(params, cache, grad_outputs)
            for name, grad in grads.items():
                step = grad + decay * params[name] if name.endswith('.weight') else grad
                velocity[name] = momentum * velocity[name] - lr * step
                params[name] += velocity[name]
        epoch_loss = total / n
        if not np.isfinite(epoch_loss) or not all(np.all(np.isfinite(p)) for p in params.values()):
            raise DivergenceError(epoch, epoch_loss)
        logger.debug('epoch %d/%d: loss %.6f', epoch, config.epochs, epoch_loss)
    return params, epoch_loss


def pretrain(data, config, architecture=None):
    """
    Train m_p on D_f from a seeded initialization.

    Targets are standardized with the mean and standard deviation of D_f; the
    constants are stored on the network and undone at prediction time.
    """
    if len(data) == 0:
        raise DatasetError('cannot pre-train on an empty dataset')
    architecture = architecture or Architecture()
    images, targets = _stack(data, np.float32)
    mean = float(targets.mean())
    std = float(targets.std())
    if std < STD_FLOOR:
        std = 1.0
    network = TaskNetwork(
        architecture=architecture,
        params=initial_params(architecture, config.seed),
        seed=config.seed,
        lineage=LINEAGE_PRETRAINED,
        target_mean=mean,
        target_std=std,
        train_config=config.to_dict(),
    )
    params, _ = _run_sgd(network, images, targets, config)
    trained = replace(network, params=params)
    trained = replace(trained, final_loss=_mse(trained, images, targets))
    logger.info('pre-trained on %d images for %d epochs: training MSE %.4f', len(data), config.epochs, trained.final_loss)
    return trained


def finetune(base, data, config, domain, min_samples=MIN_FINETUNE_SAMPLES):
    """
    Fine-tune a copy of m_p on one pseudo-domain's D_f^d (domain is 0-based).

    With fewer than min_samples images the result is an unmodified copy of the
    base flagged as fallback. The base network is never modified.
    """
    if len(data) < max(min_samples, 1):
        logger.warning(
            'pseudo-domain %d has %d images (< %d): using the pre-trained network',
            domain + 1, len(data), min_samples,
        )
        return replace(
            base, params=base.copy_params(), lineage=LINEAGE_FINETUNED, domain=domain,
            fallback=True, train_config=config.to_dict(),
        )
    images, targets = _stack(data, base.dtype)
    params, _ = _run_sgd(base, images, targets, config)
    tuned = replace(
        base, params=params, lineage=LINEAGE_FINETUNED, domain=domain, fallback=False,
        train_config=config.to_dict(), seed=config.seed,
    )
    tuned = replace(tuned, final_loss=_mse(tuned, images, targets))
    logger.info('fine-tuned pseudo-domain %d on %d images: training MSE %.4f', domain + 1, len(data), tuned.final_loss)
    return tuned


def _outputs(network, images):
    """Standardized outputs and features for a stacked batch, in inference-sized chunks."""
    outputs, features = [], []
    for start in range(0, len(images), INFERENCE_BATCH):
        out, feat, _ = forward(network.params, network.architecture, images[start:start + INFERENCE_BATCH])
        outputs.append(out)
        features.append(feat)
    if not outputs:
        return np.zeros(0), np.zeros((0, network.feature_width))
    return np.concatenate(outputs), np.concatenate(features)


def _mse(network, images, targets):
    outputs, _ = _outputs(network, images)
    predictions = outputs.astype(np.float64) * network.target_std + network.target_mean
    return float(np.mean((predictions - targets) ** 2))


def _as_batch(image):
    values = image.values
    if values.ndim != 3:
        raise ShapeError('rank', 3, values.ndim, 'task network input')
    return values[None]


def predict_qsteatosis(model, image):
    outputs, _ = _outputs(model, _as_batch(image))
    return float(outputs[0]) * model.target_std + model.target_mean


def extract_features(model, image):
    """The 512 post-ReLU activations feeding the head."""
    _, features = _outputs(model, _as_batch(image))
    return FeatureVector(features[0].astype(np.float64), image_id=getattr(image, 'image_id', ''),
                         lineage=model.lineage_tag)


def extract_many(model, images):
    """(N, 512) float64 feature rows for a list of images."""
    if not images:
        return np.zeros((0, model.feature_width))
    _, features = _outputs(model, np.stack([image.values for image in images]))
    return features.astype(np.float64)


def pooled_activations(model, image):
    """Global-average-pool output (the layer feeding the 512-wide dense layer)."""
    _, _, cache = forward(model.params, model.architecture, _as_batch(image), keep_cache=True)
    return cache['pooled'][0]


def evaluate_mse(model, dataset):
    """MSE of predict_qsteatosis over a labeled dataset, in target units."""
    if len(dataset) == 0:
        return float('nan')
    images, targets = _stack(dataset, model.dtype)
    return _mse(model, images, targets)
