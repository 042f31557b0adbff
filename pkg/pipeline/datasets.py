"""D_f and D_p from a cohort manifest."""

from pathlib import Path

from numcore.errors import DatasetError
from taskmodel.models import FeatureDataset, LabeledImage

from .models import PredictionDataset, PredictionTriplet


def image_ref(manifest, record):
    path = manifest.image_path(record)
    return LabeledImage(
        image_id=Path(record.image_path).stem,
        path=str(path),
        target=float('nan') if record.qsteatosis is None else float(record.qsteatosis),
        patient_id=record.patient_id,
        site_id=record.site_id,
        week=record.week,
    )


def build_feature_sets(manifest):
    """
    D_f: every labeled visit (weeks 0 and 48), two pairs per patient.
    D_p: one (week 0, week 12, week-48 score) triplet per patient.
    """
    incomplete = []
    pairs, triplets = [], []
    for patient_id in manifest.patient_ids:
        visits = manifest.visits(patient_id)
        if set(visits) != {0, 12, 48} or not all(manifest.image_path(r).is_file() for r in visits.values()):
            incomplete.append(patient_id)
            continue
        refs = {week: image_ref(manifest, record) for week, record in visits.items()}
        pairs += [refs[0], refs[48]]
        triplets.append(PredictionTriplet(
            patient_id=patient_id,
            site_id=visits[0].site_id,
            week0=refs[0],
            week12=refs[12],
            outcome=refs[48].target,
        ))
    if incomplete:
        raise DatasetError('patients with a missing visit image', incomplete)
    return FeatureDataset(pairs), PredictionDataset(triplets)
