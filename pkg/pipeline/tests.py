import json
import tempfile
from dataclasses import replace
from math import comb
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase, tag

from cluster.kmeans import assign, kmeans_fit
from forest.trees import rf_predict
from numcore.errors import DatasetError, PdsmError, StageError
from numcore.storage import tree_digest
from styleembed.embedding import embed_many
from styleembed.models import StyleModel
from synthsite.generator import generate_cohort, split_train_test
from synthsite.models import CohortConfig
from taskmodel.training import extract_features

from .datasets import build_feature_sets
from .evaluation import evaluate, mean_squared_error, r2_score, run_benchmark
from .fitting import fit_pipeline, load_bundle, predict_outcome, reduced_visit, save_bundle
from .models import EvalReport, PipelineConfig

TINY = {
    'synthsite.patients': 12,
    'synthsite.sites': 4,
    'synthsite.vendors': 2,
    'synthsite.image_size': 16,
    'cluster.k': 2,
    'cluster.restarts': 2,
    'taskmodel.pretrain.epochs': 2,
    'taskmodel.finetune.epochs': 1,
    'taskmodel.min_finetune_samples': 2,
    'reduce.components': 4,
    'forest.n_trees': 8,
}
TINY_COHORT = CohortConfig(patients=12, sites=4, vendors=2, image_size=16)


def tiny_config(**overrides):
    return replace(PipelineConfig.from_dotted(TINY), **overrides)


def adjusted_rand_index(labels_a, labels_b):
    pairs = list(zip(labels_a, labels_b))
    n = len(pairs)
    table = {}
    for pair in pairs:
        table[pair] = table.get(pair, 0) + 1
    rows, cols = {}, {}
    for (a, b), count in table.items():
        rows[a] = rows.get(a, 0) + count
        cols[b] = cols.get(b, 0) + count
    index = sum(comb(c, 2) for c in table.values())
    row_sum = sum(comb(c, 2) for c in rows.values())
    col_sum = sum(comb(c, 2) for c in cols.values())
    expected = row_sum * col_sum / comb(n, 2)
    maximum = (row_sum + col_sum) / 2
    return (index - expected) / (maximum - expected)


class CohortTestCase(SimpleTestCase):
    """A tiny generated cohort shared by the tests of a class."""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.tmp = tempfile.TemporaryDirectory()
        cls.root = Path(cls.tmp.name)
        cls.manifest = generate_cohort(TINY_COHORT, 3, cls.root / 'cohort')
        cls.train, cls.test = split_train_test(cls.manifest, 0.72, 3)

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()
        super().tearDownClass()


class FeatureSetTests(CohortTestCase):

    def test_counts(self):
        feature_set, prediction_set = build_feature_sets(self.manifest)
        self.assertEqual(len(feature_set), 24)
        self.assertEqual(len(prediction_set), 12)
        self.assertEqual({item.week for item in feature_set}, {0, 48})

    def test_triplets(self):
        _, prediction_set = build_feature_sets(self.manifest)
        for triplet in prediction_set:
            self.assertEqual(triplet.week0.week, 0)
            self.assertEqual(triplet.week12.week, 12)
            self.assertEqual(triplet.outcome, self.manifest.visits(triplet.patient_id)[48].qsteatosis)

    def test_missing_week_twelve_image(self):
        with tempfile.TemporaryDirectory() as tmp:
            manifest = generate_cohort(CohortConfig(patients=3, sites=2, vendors=1, image_size=16), 1, tmp)
            missing = manifest.visits('P0001')[12]
            manifest.image_path(missing).unlink()
            with self.assertRaises(DatasetError) as ctx:
                build_feature_sets(manifest)
        self.assertEqual(ctx.exception.ids, ['P0001'])


class FitTests(CohortTestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.bundle = fit_pipeline(cls.train, tiny_config())

    def test_one_pdsm_per_domain(self):
        self.assertEqual(len(self.bundle.pdsms), 2)
        self.assertEqual([net.domain for net in self.bundle.pdsms], [0, 1])
        self.assertEqual(self.bundle.pca.m, 4)
        self.assertEqual(self.bundle.forest.input_dimension, 8)
        self.assertEqual(sum(self.bundle.summary['assignments']['feature_set']), 2 * len(self.train.patient_ids))

    def test_training_features_are_stored(self):
        n = len(self.train.patient_ids)
        self.assertEqual(self.bundle.training['z0'].shape, (n, 4))
        self.assertEqual(self.bundle.training['patients'], self.train.patient_ids)

    def test_five_pdsms(self):
        bundle = fit_pipeline(self.train, tiny_config(k=5, finetune_epochs=0, n_trees=2))
        self.assertEqual(len(bundle.pdsms), 5)

    def test_too_few_patients(self):
        with self.assertRaises(StageError) as ctx:
            fit_pipeline(self.train.subset(self.train.patient_ids[:1]), tiny_config())
        self.assertEqual(ctx.exception.stage, 'datasets')
        self.assertIsInstance(ctx.exception.cause, DatasetError)

    def test_stage_errors_name_the_stage(self):
        with self.assertRaises(StageError) as ctx:
            fit_pipeline(self.train, tiny_config(components=0))
        self.assertEqual(ctx.exception.stage, 'reduce')

    def test_single_domain_without_finetuning_matches_pretrained(self):
        bundle = fit_pipeline(self.train, tiny_config(k=1, finetune_epochs=0, n_trees=2))
        feature_set, _ = build_feature_sets(self.train)
        for item in list(feature_set)[:6]:
            image = item.load()
            np.testing.assert_array_equal(
                extract_features(bundle.pdsms[0], image).values, extract_features(bundle.pretrained, image).values,
            )

    def test_predict_within_training_range(self):
        _, prediction_set = build_feature_sets(self.test)
        low, high = self.bundle.training['s48'].min(), self.bundle.training['s48'].max()
        for triplet in prediction_set:
            value = predict_outcome(self.bundle, triplet.week0.load(), triplet.week12.load())
            self.assertTrue(low - 1e-12 <= value <= high + 1e-12)

    def test_predict_is_deterministic(self):
        triplet = next(iter(build_feature_sets(self.test)[1]))
        x0, x12 = triplet.week0.load(), triplet.week12.load()
        self.assertEqual(predict_outcome(self.bundle, x0, x12), predict_outcome(self.bundle, x0, x12))

    def test_identical_visits_give_identical_blocks(self):
        triplet = next(iter(build_feature_sets(self.test)[1]))
        image = triplet.week12.load()
        _, z = reduced_visit(self.bundle, image)
        joined = np.concatenate([z, z])
        np.testing.assert_array_equal(joined[:4], joined[4:])
        self.assertEqual(predict_outcome(self.bundle, image, image), rf_predict(self.bundle.forest, joined))

    def test_single_memorizing_tree_recovers_training_targets(self):
        config = tiny_config(n_trees=1, bootstrap=False, min_samples_leaf=1, max_features=8)
        bundle = fit_pipeline(self.train, config)
        _, prediction_set = build_feature_sets(self.train)
        for triplet in list(prediction_set)[:4]:
            value = predict_outcome(bundle, triplet.week0.load(), triplet.week12.load())
            self.assertEqual(value, float(np.float32(triplet.outcome)))


class BundleTests(CohortTestCase):

    def test_roundtrip_and_identity(self):
        config = tiny_config()
        first = fit_pipeline(self.train, config)
        second = fit_pipeline(self.train, replace(config, threads=3))
        a, b = self.root / 'a', self.root / 'b'
        save_bundle(first, a)
        save_bundle(second, b)
        self.assertEqual(tree_digest(a), tree_digest(b))

        loaded = load_bundle(a)
        self.assertEqual(loaded.k, 2)
        np.testing.assert_array_equal(loaded.training['z12'], first.training['z12'])
        c = self.root / 'c'
        save_bundle(loaded, c)
        self.assertEqual(tree_digest(a), tree_digest(c))
        for triplet in build_feature_sets(self.test)[1]:
            x0, x12 = triplet.week0.load(), triplet.week12.load()
            self.assertEqual(predict_outcome(loaded, x0, x12), predict_outcome(first, x0, x12))

    def test_tampered_component_is_rejected(self):
        target = self.root / 'tampered'
        save_bundle(fit_pipeline(self.train, tiny_config(n_trees=2)), target)
        (target / 'forest' / 'forest.json').write_text('{}', encoding='utf-8')
        with self.assertRaises(PdsmError):
            load_bundle(target)

    def test_manifest_records_hashes(self):
        target = self.root / 'manifest'
        save_bundle(fit_pipeline(self.train, tiny_config(n_trees=2)), target)
        manifest = json.loads((target / 'bundle.json').read_text(encoding='utf-8'))
        self.assertEqual(set(manifest['hashes']), set(manifest['components']))
        self.assertNotIn('run.threads', manifest['config'])
        self.assertEqual(sorted(p.name for p in (target / 'pdsm').iterdir()), ['1', '2'])

    def test_failed_save_leaves_no_bundle(self):
        bundle = fit_pipeline(self.train, tiny_config(n_trees=2))
        target = self.root / 'broken'
        with self.assertRaises(TypeError):
            save_bundle(replace(bundle, summary={'bad': object()}), target)
        self.assertFalse(target.exists())
        self.assertEqual([p for p in self.root.iterdir() if p.name.startswith('.broken')], [])

    def test_test_images_do_not_influence_the_bundle(self):
        config = tiny_config(n_trees=2)
        before = self.root / 'before'
        save_bundle(fit_pipeline(self.train, config), before)
        with tempfile.TemporaryDirectory() as tmp:
            manifest = generate_cohort(TINY_COHORT, 3, tmp)
            train, test = split_train_test(manifest, 0.72, 3)
            for record in test.records:
                test.image_path(record).unlink()
            after = self.root / 'after'
            save_bundle(fit_pipeline(train, config), after)
        self.assertEqual(tree_digest(before), tree_digest(after))

    def test_single_domain_bundles_are_identical(self):
        config = tiny_config(k=1, finetune_epochs=0, n_trees=2)
        pdsm, single = self.root / 'k1-pdsm', self.root / 'k1-single'
        save_bundle(fit_pipeline(self.train, config), pdsm)
        save_bundle(fit_pipeline(self.train, config.single_model()), single)
        self.assertEqual(tree_digest(pdsm), tree_digest(single))


class MetricTests(SimpleTestCase):

    def test_perfect_predictions(self):
        truth = [0.5, 1.0, 2.0, 3.5]
        self.assertEqual(r2_score(truth, truth), 1.0)
        self.assertEqual(mean_squared_error(truth, truth), 0.0)

    def test_mean_predictor(self):
        truth = np.array([0.5, 1.0, 2.0, 3.5])
        self.assertAlmostEqual(r2_score(truth, np.full(4, truth.mean())), 0.0, places=12)

    def test_constant_truth(self):
        with self.assertRaises(PdsmError):
            r2_score([2.0, 2.0, 2.0], [1.0, 2.0, 3.0])

    def test_report_validation(self):
        with self.assertRaises(PdsmError):
            EvalReport(mode='both', r2=0.0, mse=0.0, n_test=2)


class EvaluateTests(CohortTestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.bundle = fit_pipeline(cls.train, tiny_config())

    def test_report_is_self_consistent(self):
        for mode in ('pdsm', 'single_visit'):
            report = evaluate(self.bundle, self.test, mode)
            self.assertEqual(report.mode, mode)
            self.assertEqual(report.n_test, len(self.test.patient_ids))
            truth = np.array([t for _, t, _ in report.pairs])
            predicted = np.array([p for _, _, p in report.pairs])
            self.assertAlmostEqual(report.mse, float(np.mean((truth - predicted) ** 2)), places=12)
            expected = 1 - np.sum((truth - predicted) ** 2) / np.sum((truth - truth.mean()) ** 2)
            self.assertAlmostEqual(report.r2, float(expected), places=12)

    def test_pdsm_pairs_match_predict_outcome(self):
        report = evaluate(self.bundle, self.test, 'pdsm', threads=2)
        _, prediction_set = build_feature_sets(self.test)
        for triplet, (patient, _, predicted) in zip(prediction_set, report.pairs):
            self.assertEqual(patient, triplet.patient_id)
            self.assertEqual(predicted, predict_outcome(self.bundle, triplet.week0.load(), triplet.week12.load()))

    def test_unknown_mode(self):
        with self.assertRaises(PdsmError):
            evaluate(self.bundle, self.test, 'ensemble')

    def test_single_model_needs_one_domain(self):
        with self.assertRaises(PdsmError):
            evaluate(self.bundle, self.test, 'single_model')

    def test_single_domain_modes_agree(self):
        bundle = fit_pipeline(self.train, tiny_config(k=1, finetune_epochs=0))
        pdsm = evaluate(bundle, self.test, 'pdsm')
        single = evaluate(bundle, self.test, 'single_model')
        self.assertEqual((pdsm.r2, pdsm.mse), (single.r2, single.mse))

    def test_too_few_test_patients(self):
        with self.assertRaises(DatasetError):
            evaluate(self.bundle, self.test.subset(self.test.patient_ids[:1]))


class BenchmarkTests(SimpleTestCase):

    def test_table_rows_and_files(self):
        values = {**TINY, 'forest.n_trees': 3}
        with tempfile.TemporaryDirectory() as tmp:
            table = run_benchmark(values, [1, 2], tmp)
            self.assertEqual([row['seed'] for row in table.rows], [1, 2, 'mean'])
            mean = table.rows[-1]
            self.assertAlmostEqual(mean['pdsm_mse'], (table.rows[0]['pdsm_mse'] + table.rows[1]['pdsm_mse']) / 2)
            written = json.loads((Path(tmp) / 'benchmark.json').read_text(encoding='utf-8'))
            self.assertEqual(len(written['rows']), 3)
            self.assertIn('single_visit_r2', (Path(tmp) / 'benchmark.txt').read_text(encoding='utf-8'))
            self.assertTrue((Path(tmp) / 'seed-1' / 'report_pdsm.json').is_file())
            self.assertTrue(all(check['seed'] in (1, 2) for check in table.finetune_checks))

    def test_no_seeds(self):
        with self.assertRaises(PdsmError):
            run_benchmark(TINY, [], '.')

    def test_failing_seed_is_named(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(StageError) as ctx:
                run_benchmark({**TINY, 'synthsite.patients': 2}, [7], tmp)
        self.assertEqual(ctx.exception.stage, 'benchmark seed 7')


@tag('slow')
class AcceptanceTests(SimpleTestCase):

    def test_pseudo_domains_recover_vendors(self):
        config = CohortConfig(vendors=5, heterogeneity=1.0)
        with tempfile.TemporaryDirectory() as tmp:
            manifest = generate_cohort(config, 42, tmp, threads=4)
            feature_set, _ = build_feature_sets(manifest)
            images = [item.load() for item in feature_set]
            style = StyleModel.random(42, config.echoes)
            model = kmeans_fit(embed_many(style, images, threads=4), 5, 42, threads=4)
            vendors = manifest.site_vendors()
            truth = [vendors[item.site_id] for item in feature_set]
            found = [assign(model, embedding) for embedding in embed_many(style, images)]
        self.assertGreaterEqual(adjusted_rand_index(found, truth), 0.5)

    def test_benchmark_direction(self):
        with tempfile.TemporaryDirectory() as tmp:
            table = run_benchmark({}, [1, 2, 3, 4, 5], tmp, threads=4)
        mean = table.rows[-1]
        self.assertGreaterEqual(mean['pdsm_r2'], mean['single_model_r2'] + 0.05)
        self.assertLess(mean['pdsm_mse'], mean['single_model_mse'])
        self.assertGreaterEqual(mean['pdsm_r2'], mean['single_visit_r2'] - 0.02)

    def test_default_structure(self):
        with tempfile.TemporaryDirectory() as tmp:
            manifest = generate_cohort(CohortConfig(), 42, tmp, threads=4)
            train, _ = split_train_test(manifest, 0.72, 42)
            bundle = fit_pipeline(train, replace(PipelineConfig.from_dotted(), threads=4))
        self.assertEqual(len(bundle.pdsms), 5)
        self.assertLessEqual(bundle.pca.m, 32)


class AdjustedRandTests(SimpleTestCase):

    def test_identical_partitions(self):
        self.assertEqual(adjusted_rand_index([0, 0, 1, 1, 2], [5, 5, 3, 3, 9]), 1.0)

    def test_crossed_partitions(self):
        self.assertAlmostEqual(adjusted_rand_index([0, 0, 1, 1], [0, 1, 0, 1]), -0.5)
