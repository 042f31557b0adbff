"""
Synthetic multi-site longitudinal cohort.

Images are smooth tissue fields with fat blobs whose coverage follows the
latent steatosis score, pushed through a per-site scanner transform. Every
random draw comes from a stream keyed by the entity it belongs to (vendor,
site, patient, image), so growing the cohort leaves existing entities alone.
"""

import logging
import math
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from numcore.errors import DatasetError, PdsmError
from numcore.models import ImageVolume
from numcore.parallel import parallel_map
from numcore.rng import rng_for
from numcore.storage import write_tensor

from .models import (
    STEATOSIS_RANGE, WEEKS, CohortConfig, CohortManifest, PatientSim, SiteProfile, VisitRecord, write_manifest,
)

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'manifest.jsonl'
TISSUE_LEVEL = 0.5
TISSUE_CONTRAST = 0.1
FAT_LEVEL = 0.5

# (low, high) of each scanner parameter at heterogeneity 1; 0 collapses to neutral.
VENDOR_RANGES = {
    'gain': (0.7, 1.3),
    'gamma': (0.7, 1.4),
    'bias_amplitude': (0.0, 0.3),
    'blur_sigma': (0.0, 1.6),
    'noise_scale': (1.0, 4.0),
}
SITE_JITTER = 0.08


def patient_id(index):
    return f'P{index:04d}'


def site_id(index):
    return f'S{index:03d}'


def vendor_archetypes(vendors, seed):
    """
    Per-vendor parameter centres in [0, 1] units, Latin-hypercube spread so
    no two vendors share a stratum on any parameter.
    """
    rng = rng_for(seed, 'vendors', vendors)
    archetypes = [{} for _ in range(vendors)]
    for name in VENDOR_RANGES:
        strata = rng.permutation(vendors)
        offsets = rng.uniform(0.15, 0.85, size=vendors)
        for vendor in range(vendors):
            archetypes[vendor][name] = (strata[vendor] + offsets[vendor]) / vendors
    archetypes_angle = rng.uniform(0, 2 * math.pi, size=vendors)
    for vendor in range(vendors):
        archetypes[vendor]['bias_angle'] = float(archetypes_angle[vendor])
    return archetypes


def draw_site(index, archetype, config, seed):
    """A site's profile: its vendor's centre plus a small site-specific jitter, scaled by heterogeneity."""
    h = config.heterogeneity
    rng = rng_for(seed, 'site', index)
    jitter = rng.normal(0.0, SITE_JITTER, size=len(VENDOR_RANGES))
    values = {}
    for (name, (low, high)), noise in zip(VENDOR_RANGES.items(), jitter):
        position = float(np.clip(archetype[name] + noise, 0.0, 1.0))
        neutral = 0.0 if name in ('bias_amplitude', 'blur_sigma') else 1.0
        values[name] = neutral + h * (low + (high - low) * position - neutral)
    angle = archetype['bias_angle'] + rng.normal(0.0, 0.3)
    return SiteProfile(
        site_id=site_id(index),
        vendor=index % config.vendors,
        gain=float(np.clip(values['gain'], 0.5, 1.5)),
        bias_amplitude=max(values['bias_amplitude'], 0.0),
        bias_angle=float(angle),
        noise_sigma=config.noise_sigma * max(values['noise_scale'], 0.0),
        blur_sigma=max(values['blur_sigma'], 0.0),
        gamma=float(np.clip(values['gamma'], 0.6, 1.6)),
    )


def draw_sites(config, seed):
    archetypes = vendor_archetypes(config.vendors, seed)
    return [draw_site(index, archetypes[index % config.vendors], config, seed) for index in range(config.sites)]


def draw_patient(index, sites, config, seed):
    """Latent scores; patients go round-robin over a seeded ordering of the sites."""
    order = rng_for(seed, 'site-order', len(sites)).permutation(len(sites))
    rng = rng_for(seed, 'patient', index)
    s0 = rng.uniform(0.5, 3.5)
    responder = bool(rng.random() < config.responder_rate)
    delta = rng.uniform(0.5, 1.5)
    epsilon = rng.normal(0.0, 0.1)
    s48 = float(np.clip(s0 - responder * delta + epsilon, *STEATOSIS_RANGE))
    return PatientSim(
        patient_id=patient_id(index),
        site_id=sites[order[index % len(sites)]].site_id,
        s0=float(s0),
        responder=responder,
        s12=float(s0 + 0.35 * (s48 - s0)),
        s48=s48,
    )


def smooth_field(seed, kind, size, sigma):
    """Zero-mean, unit-variance Gaussian-smoothed noise on a periodic grid."""
    raw = rng_for(seed, kind).normal(size=(size, size))
    field = ndimage.gaussian_filter(raw, sigma=sigma, mode='wrap')
    return (field - field.mean()) / field.std()


def tissue_field(seed, size=64):
    return TISSUE_LEVEL + TISSUE_CONTRAST * smooth_field(seed, 'tissue', size, size / 8)


def fat_mask(latent, seed, size=64, max_fat_fraction=0.3):
    """
    Blob mask covering round(latent / 4 * max_fat_fraction * size^2) pixels:
    the top pixels of a smooth field, so coverage is nested in the latent.
    """
    count = int(round(latent / 4.0 * max_fat_fraction * size * size))
    mask = np.zeros(size * size, dtype=bool)
    if count:
        field = smooth_field(seed, 'fat', size, 2.0).ravel()
        mask[np.argsort(-field, kind='stable')[:count]] = True
    return mask.reshape(size, size)


def render_image(latent, site, seed, echoes=6, size=64, max_fat_fraction=0.3, anatomy_seed=None, image_id=''):
    """
    One E x size x size image of a liver with steatosis `latent` seen by `site`.

    Site transform order: gamma, gain, low-frequency bias field, Gaussian blur,
    additive noise.
    """
    low, high = STEATOSIS_RANGE
    if not low <= latent <= high:
        raise PdsmError(f'latent steatosis {latent} outside [0, 4]')
    tissue = tissue_field(seed if anatomy_seed is None else anatomy_seed, size)
    fat = FAT_LEVEL * fat_mask(latent, seed, size, max_fat_fraction)
    modulation = 1.0 + 0.5 * (latent / 4.0) * np.cos(np.pi * np.arange(echoes))
    image = tissue[None] + fat[None] * modulation[:, None, None]

    image = np.power(np.maximum(image, 0.0), site.gamma)
    image = image * site.gain
    if site.bias_amplitude:
        axis = np.linspace(-1.0, 1.0, size)
        ramp = math.cos(site.bias_angle) * axis[None, :] + math.sin(site.bias_angle) * axis[:, None]
        image = image * (1.0 + site.bias_amplitude * ramp / math.sqrt(2.0))[None]
    if site.blur_sigma:
        image = ndimage.gaussian_filter(image, sigma=(0, site.blur_sigma, site.blur_sigma), mode='nearest')
    if site.noise_sigma:
        image = image + rng_for(seed, 'noise').normal(0.0, site.noise_sigma, size=image.shape)
    return ImageVolume(image.astype(np.float32), image_id=image_id)


def image_seed(seed, patient, week):
    return int(rng_for(seed, 'image', patient, week).integers(0, 2 ** 63))


def write_preview(volume, path):
    """First echo as an 8-bit grayscale PNG, stretched to its own range."""
    channel = volume.values[0].astype(np.float64)
    span = channel.max() - channel.min()
    scaled = (channel - channel.min()) / span if span > 0 else np.zeros_like(channel)
    Image.fromarray(np.round(scaled * 255).astype(np.uint8)).save(path)


def generate_cohort(config, seed, out_dir, threads=1, previews=False):
    """Render every visit of every patient to out_dir/images and write out_dir/manifest.jsonl."""
    if not isinstance(config, CohortConfig):
        config = CohortConfig(**config)
    out_dir = Path(out_dir)
    (out_dir / 'images').mkdir(parents=True, exist_ok=True)
    if previews:
        (out_dir / 'previews').mkdir(exist_ok=True)

    sites = draw_sites(config, seed)
    by_id = {site.site_id: site for site in sites}
    patients = [draw_patient(index, sites, config, seed) for index in range(config.patients)]
    logger.info('generating %d patients over %d sites (%d vendors, heterogeneity %.2f)',
                config.patients, config.sites, config.vendors, config.heterogeneity)

    def render_patient(patient):
        records = []
        anatomy = image_seed(seed, patient.patient_id, 'anatomy')
        for week in WEEKS:
            name = f'{patient.patient_id}_w{week:02d}'
            volume = render_image(
                patient.latent(week), by_id[patient.site_id], image_seed(seed, patient.patient_id, week),
                echoes=config.echoes, size=config.image_size, max_fat_fraction=config.max_fat_fraction,
                anatomy_seed=anatomy, image_id=name,
            )
            relative = f'images/{name}.tns'
            write_tensor(out_dir / relative, volume.values)
            if previews and week == 0:
                write_preview(volume, out_dir / 'previews' / f'{name}.png')
            records.append(VisitRecord(patient.patient_id, patient.site_id, week, relative, patient.label(week)))
        return records

    records = [record for batch in parallel_map(render_patient, patients, threads) for record in batch]
    manifest = CohortManifest(
        records=records, config_hash=config.digest(), seed=seed, root=out_dir,
        config=config.to_dict(), sites=sites,
    )
    write_manifest(manifest, out_dir / MANIFEST_NAME)
    logger.info('wrote %d visit records (%d labeled) to %s', len(records),
                sum(r.qsteatosis is not None for r in records), out_dir)
    return manifest


def split_train_test(manifest, train_fraction=0.72, seed=0):
    """Seeded patient-level split; every visit of a patient lands on the same side."""
    if not 0 < train_fraction < 1:
        raise PdsmError(f'train_fraction {train_fraction} must lie strictly between 0 and 1')
    ids = manifest.patient_ids
    if len(ids) < 2:
        raise DatasetError('splitting needs at least 2 patients', ids)
    n_train = min(max(int(round(train_fraction * len(ids))), 1), len(ids) - 1)
    order = rng_for(seed, 'split', len(ids)).permutation(len(ids))
    train_ids = [ids[i] for i in order[:n_train]]
    train = manifest.subset(train_ids)
    test = manifest.subset(set(ids) - set(train_ids))
    logger.info('split %d patients into %d train / %d test', len(ids), n_train, len(ids) - n_train)
    return train, test
