"""
The four fitting steps, outcome prediction and bundle persistence.

1. pre-train the task network on D_f; embed D_f and cluster it into k pseudo-domains
2. fine-tune one copy of the network per pseudo-domain
3. extract features of every D_p image with its pseudo-domain's network; fit PCA
4. fit the outcome forest on the concatenated week-0 and week-12 reduced features
"""

import logging
from collections import Counter
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np

from cluster.kmeans import assign, cluster_composition, kmeans_fit, partition_dataset
from cluster.models import load_cluster_model, save_cluster_model
from forest.models import load_forest, save_forest
from forest.trees import as_stored, rf_fit, rf_predict
from numcore.errors import DatasetError, PdsmError, StageError
from numcore.parallel import parallel_map
from numcore.storage import atomic_directory, read_json, read_tensor, tree_digest, write_json, write_tensor
from reduce.models import load_pca_model, save_pca_model
from reduce.pca import pca_fit, pca_transform, pca_transform_many
from styleembed.embedding import embed_many, style_embedding
from styleembed.models import StyleModel, load_style_model, save_style_model
from taskmodel.models import Architecture, load_network, save_network
from taskmodel.training import evaluate_mse, extract_features, finetune, pretrain

from .datasets import build_feature_sets
from .models import PipelineBundle, PipelineConfig

logger = logging.getLogger(__name__)

BUNDLE_MANIFEST = 'bundle.json'
COMPONENTS = ('style', 'cluster', 'pretrained', 'pdsm', 'pca', 'forest', 'training')


@contextmanager
def stage(name):
    """Log a stage and re-raise any failure inside it as StageError(name)."""
    logger.info('stage %s: start', name)
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc
    logger.info('stage %s: done', name)


def build_style_model(config, in_channels):
    if config.style_weights_dir:
        return load_style_model(config.style_weights_dir, selected_layers=config.style_layers)
    return StyleModel.random(config.seed, in_channels, selected_layers=config.style_layers)


def reduced_visit(bundle, image, route=True):
    """(pseudo-domain, z) for one image; without routing the first network is used."""
    domain = assign(bundle.cluster, style_embedding(bundle.style, image)) if route else 0
    features = extract_features(bundle.pdsms[domain], image)
    return domain, as_stored(pca_transform(bundle.pca, features).values)


def fit_pipeline(train_manifest, config=None, seed=None):
    """Fit every component on the training manifest and return a self-contained bundle."""
    config = config or PipelineConfig.from_dotted()
    if seed is not None:
        config = replace(config, seed=seed)
    threads = config.threads

    with stage('datasets'):
        feature_set, prediction_set = build_feature_sets(train_manifest)
        if len(prediction_set) < max(config.k, 2):
            raise DatasetError(f'need at least {max(config.k, 2)} training patients, got {len(prediction_set)}')
        first = next(iter(feature_set)).load()
        architecture = Architecture(echoes=first.channels, size=first.height, use_bias=config.use_bias)
        logger.info('D_f: %d labeled images, D_p: %d patients', len(feature_set), len(prediction_set))

    with stage('pretrain'):
        pretrained = pretrain(feature_set, config.pretrain_config(), architecture)

    with stage('cluster'):
        style = build_style_model(config, architecture.echoes)
        embeddings = embed_many(style, [item.load() for item in feature_set], threads)
        by_id = {item.image_id: embedding for item, embedding in zip(feature_set, embeddings)}
        cluster = kmeans_fit(
            embeddings, config.k, config.seed, max_iter=config.max_iter, restarts=config.restarts, threads=threads,
        ).as_stored()
        subsets = partition_dataset(feature_set, cluster, by_id)
        domains = [assign(cluster, by_id[item.image_id]) for item in feature_set]
        composition = cluster_composition(domains, [item.site_id for item in feature_set])
        for domain, sites in composition.items():
            logger.info('pseudo-domain %d: %d images from sites %s', domain + 1, sum(sites.values()),
                        ', '.join(f'{site}x{count}' for site, count in sites.items()))

    with stage('finetune'):
        tune = config.finetune_config()
        pdsms = parallel_map(
            lambda d: finetune(pretrained, subsets[d], tune, d, min_samples=config.min_finetune_samples),
            range(config.k), threads,
        )
        checks = []
        for domain, (subset, network) in enumerate(zip(subsets, pdsms)):
            if len(subset):
                checks.append({
                    'domain': domain + 1,
                    'n': len(subset),
                    'pretrained_mse': evaluate_mse(pretrained, subset),
                    'finetuned_mse': evaluate_mse(network, subset),
                    'fallback': network.fallback,
                })

    with stage('features'):
        refs = [ref for triplet in prediction_set for ref in (triplet.week0, triplet.week12)]

        def extract(ref):
            volume = ref.load()
            domain = assign(cluster, style_embedding(style, volume))
            return domain, extract_features(pdsms[domain], volume).values

        extracted = parallel_map(extract, refs, threads)
        visit_domains = [domain for domain, _ in extracted]
        rows = np.stack([values for _, values in extracted])
        rows0, rows12 = rows[0::2], rows[1::2]

    with stage('reduce'):
        pca = pca_fit(np.vstack([rows0, rows12]), config.components).as_stored()
        z0 = as_stored(pca_transform_many(pca, rows0))
        z12 = as_stored(pca_transform_many(pca, rows12))

    with stage('forest'):
        outcomes = prediction_set.outcomes
        forest = rf_fit(np.hstack([z0, z12]), outcomes, config.forest_hyper(), seed=config.seed, threads=threads)

    summary = {
        'assignments': {
            'feature_set': _counts(domains, config.k),
            'prediction_set': _counts(visit_domains, config.k),
        },
        'composition': {str(domain + 1): sites for domain, sites in composition.items()},
        'finetune_check': checks,
    }
    return PipelineBundle(
        style=style, cluster=cluster, pretrained=pretrained, pdsms=pdsms, pca=pca, forest=forest,
        config=config.to_dotted(include_run=False), seed=config.seed,
        training={
            'patients': [t.patient_id for t in prediction_set],
            'z0': z0, 'z12': z12, 's48': outcomes,
        },
        summary=summary,
    )


def _counts(domains, k):
    counts = Counter(domains)
    return [counts.get(d, 0) for d in range(k)]


def predict_outcome(bundle, x0, x12):
    """Predicted week-48 qSteatosis from the week-0 and week-12 images; each visit is routed on its own."""
    _, z0 = reduced_visit(bundle, x0)
    _, z12 = reduced_visit(bundle, x12)
    return rf_predict(bundle.forest, np.concatenate([z0, z12]))


def save_bundle(bundle, target):
    """Write the bundle directory atomically; bundle.json records a sha256 per component."""
    with atomic_directory(target) as staging:
        save_style_model(bundle.style, staging / 'style')
        save_cluster_model(bundle.cluster, staging / 'cluster')
        save_network(bundle.pretrained, staging / 'pretrained')
        for domain, network in enumerate(bundle.pdsms, start=1):
            save_network(network, staging / 'pdsm' / str(domain))
        save_pca_model(bundle.pca, staging / 'pca')
        save_forest(bundle.forest, staging / 'forest')
        training = staging / 'training'
        training.mkdir()
        write_tensor(training / 'z0.tns', bundle.training['z0'])
        write_tensor(training / 'z12.tns', bundle.training['z12'])
        write_json(training / 'training.json', {
            'patients': list(bundle.training['patients']),
            's48': [float(v) for v in bundle.training['s48']],
        })
        write_json(staging / BUNDLE_MANIFEST, {
            'config': bundle.config,
            'seed': bundle.seed,
            'k': bundle.k,
            'components': list(COMPONENTS),
            'hashes': {name: tree_digest(staging / name) for name in COMPONENTS},
            'summary': bundle.summary,
        })
    logger.info('bundle with %d PDSMs written to %s', bundle.k, target)


def load_bundle(directory):
    directory = Path(directory)
    manifest = read_json(directory / BUNDLE_MANIFEST)
    for name in manifest['components']:
        if tree_digest(directory / name) != manifest['hashes'][name]:
            raise PdsmError(f'{directory}: component {name!r} does not match its recorded hash')
    training = read_json(directory / 'training' / 'training.json')
    return PipelineBundle(
        style=load_style_model(directory / 'style'),
        cluster=load_cluster_model(directory / 'cluster'),
        pretrained=load_network(directory / 'pretrained'),
        pdsms=[load_network(directory / 'pdsm' / str(d)) for d in range(1, int(manifest['k']) + 1)],
        pca=load_pca_model(directory / 'pca'),
        forest=load_forest(directory / 'forest'),
        config=manifest['config'],
        seed=int(manifest['seed']),
        training={
            'patients': training['patients'],
            'z0': read_tensor(directory / 'training' / 'z0.tns').astype(np.float64),
            'z12': read_tensor(directory / 'training' / 'z12.tns').astype(np.float64),
            's48': np.array(training['s48'], dtype=np.float64),
        },
        summary=manifest['summary'],
    )
