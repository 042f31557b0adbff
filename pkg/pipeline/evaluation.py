"""Test-set evaluation in the three modes, and the seeded multi-run benchmark."""

import logging
from dataclasses import replace
from pathlib import Path

import numpy as np

from forest.trees import rf_fit, rf_predict_many
from numcore.errors import DatasetError, PdsmError, StageError
from numcore.parallel import parallel_map
from numcore.storage import write_json
from synthsite.generator import generate_cohort, split_train_test

from .datasets import build_feature_sets
from .fitting import fit_pipeline, reduced_visit
from .models import BENCHMARK_COLUMNS, MODES, BenchmarkTable, EvalReport, PipelineConfig, cohort_config

logger = logging.getLogger(__name__)


def r2_score(truth, prediction):
    truth = np.asarray(truth, dtype=np.float64)
    total = float(np.sum((truth - truth.mean()) ** 2))
    if total == 0.0:
        raise PdsmError('R2 is undefined: test targets have zero variance')
    return 1.0 - float(np.sum((truth - np.asarray(prediction)) ** 2)) / total


def mean_squared_error(truth, prediction):
    residual = np.asarray(truth, dtype=np.float64) - np.asarray(prediction, dtype=np.float64)
    return float(np.mean(residual ** 2))


def single_visit_forest(bundle, threads=1):
    """The bundle's forest hyperparameters re-fit on week-12 reduced features only."""
    return rf_fit(bundle.training['z12'], bundle.training['s48'], bundle.forest.hyper, seed=bundle.seed,
                  threads=threads)


def evaluate(bundle, test_manifest, mode='pdsm', threads=1):
    """
    R2 and MSE on the test patients.

    pdsm          every visit routed to its pseudo-domain's network
    single_model  a k = 1 bundle; every visit goes through its only network
    single_visit  forest re-fit on week-12 features only
    """
    if mode not in MODES:
        raise PdsmError(f'unknown evaluation mode {mode!r}; expected one of {", ".join(MODES)}')
    if mode == 'single_model' and bundle.k != 1:
        raise PdsmError(f'single_model evaluation needs a k=1 bundle, this one has k={bundle.k}')
    _, prediction_set = build_feature_sets(test_manifest)
    if len(prediction_set) < 2:
        raise DatasetError(f'evaluation needs at least 2 test patients, got {len(prediction_set)}')
    truth = prediction_set.outcomes
    if np.all(truth == truth[0]):
        raise PdsmError('R2 is undefined: test targets have zero variance')

    route = mode != 'single_model'

    def reduce_patient(triplet):
        _, z0 = reduced_visit(bundle, triplet.week0.load(), route)
        _, z12 = reduced_visit(bundle, triplet.week12.load(), route)
        return z0, z12

    reduced = parallel_map(reduce_patient, prediction_set, threads)
    z0 = np.stack([z for z, _ in reduced])
    z12 = np.stack([z for _, z in reduced])
    if mode == 'single_visit':
        predictions = rf_predict_many(single_visit_forest(bundle, threads), z12)
    else:
        predictions = rf_predict_many(bundle.forest, np.hstack([z0, z12]))

    report = EvalReport(
        mode=mode,
        r2=r2_score(truth, predictions),
        mse=mean_squared_error(truth, predictions),
        n_test=len(truth),
        pairs=tuple((t.patient_id, float(y), float(p)) for t, y, p in zip(prediction_set, truth, predictions)),
    )
    logger.info('%s: R2 %.4f, MSE %.4f over %d test patients', mode, report.r2, report.mse, report.n_test)
    return report


def write_report(report, directory, stem=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = stem or f'report_{report.mode}'
    write_json(directory / f'{stem}.json', report.to_dict())
    (directory / f'{stem}.txt').write_text(report.to_text(), encoding='utf-8')


def benchmark_seed(values, seed, out_dir, threads=1):
    """Generate, split, fit PDSM and single-model bundles, evaluate all three modes for one seed."""
    cohort, train_fraction = cohort_config(values)
    config = replace(PipelineConfig.from_dotted(values), seed=seed, threads=threads)
    seed_dir = Path(out_dir) / f'seed-{seed}'
    manifest = generate_cohort(cohort, seed, seed_dir / 'cohort', threads=threads)
    train, test = split_train_test(manifest, train_fraction, seed)

    pdsm_bundle = fit_pipeline(train, config)
    single_bundle = fit_pipeline(train, config.single_model())
    reports = {
        'pdsm': evaluate(pdsm_bundle, test, 'pdsm', threads),
        'single_model': evaluate(single_bundle, test, 'single_model', threads),
        'single_visit': evaluate(pdsm_bundle, test, 'single_visit', threads),
    }
    for report in reports.values():
        write_report(report, seed_dir)
    row = {'seed': seed}
    for mode, report in reports.items():
        row[f'{mode}_r2'] = report.r2
        row[f'{mode}_mse'] = report.mse
    checks = [{'seed': seed, **check} for check in pdsm_bundle.summary['finetune_check']]
    return row, checks


def run_benchmark(values, seeds, out_dir, threads=1):
    """
    PDSM vs. single model vs. single visit for every seed, plus a mean row.
    Writes benchmark.json and benchmark.txt to out_dir. A failing seed aborts the run.
    """
    seeds = list(seeds)
    if not seeds:
        raise PdsmError('benchmark needs at least one seed')
    rows, checks = [], []
    for seed in seeds:
        logger.info('benchmark seed %s', seed)
        try:
            row, seed_checks = benchmark_seed(values, seed, out_dir, threads)
        except Exception as exc:
            raise StageError(f'benchmark seed {seed}', exc) from exc
        rows.append(row)
        checks += seed_checks
    rows.append({'seed': 'mean', **{name: float(np.mean([r[name] for r in rows])) for name in BENCHMARK_COLUMNS}})
    table = BenchmarkTable(rows=tuple(rows), finetune_checks=tuple(checks))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_json(out_dir / 'benchmark.json', table.to_dict())
    (out_dir / 'benchmark.txt').write_text(table.to_text(), encoding='utf-8')
    return table
