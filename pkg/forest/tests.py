import struct
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from numcore.errors import DatasetError, NonFiniteError, ShapeError
from numcore.storage import tree_digest

from .models import LEAF, NODE_RECORD, ForestHyper, RegressionTree, load_forest, save_forest
from .trees import best_split, rf_fit, rf_predict, rf_predict_many, split_thresholds

SINGLE = ForestHyper(n_trees=1, max_features=0, min_samples_leaf=1, bootstrap=False)


def brute_force_split(x, y, min_samples_leaf=1):
    """Largest SSE reduction over every (feature, midpoint) candidate, by direct evaluation."""
    def sse(values):
        return float(((values - values.mean()) ** 2).sum()) if len(values) else 0.0

    parent = sse(y)
    best = -np.inf
    for feature in range(x.shape[1]):
        values = np.unique(x[:, feature])
        for low, high in zip(values[:-1], values[1:]):
            mask = x[:, feature] <= 0.5 * (low + high)
            if mask.sum() < min_samples_leaf or (~mask).sum() < min_samples_leaf:
                continue
            best = max(best, parent - sse(y[mask]) - sse(y[~mask]))
    return best


def r2(truth, prediction):
    return 1.0 - np.sum((truth - prediction) ** 2) / np.sum((truth - truth.mean()) ** 2)


class SplitTests(SimpleTestCase):

    def test_root_split_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n, p = int(rng.integers(4, 21)), int(rng.integers(1, 4))
            x = np.round(rng.normal(size=(n, p)), 1)
            y = rng.normal(size=n)
            model = rf_fit(x, y, ForestHyper(n_trees=1, max_features=p, min_samples_leaf=1, bootstrap=False))
            tree = model.trees[0]
            expected = brute_force_split(x, y)
            if not np.isfinite(expected) or expected <= 0:
                self.assertEqual(tree.feature[0], LEAF)
                continue
            feature, threshold = tree.feature[0], tree.threshold[0]
            mask = x[:, feature] <= threshold
            self.assertTrue(0 < mask.sum() < n)
            centered = y - y.mean()
            achieved = (centered ** 2).sum() - sum(
                ((part - part.mean()) ** 2).sum() for part in (y[mask], y[~mask])
            )
            self.assertAlmostEqual(achieved, expected, delta=1e-9)

    def test_tie_prefers_lower_feature_then_threshold(self):
        x = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
        y = np.array([0.0, 0.0, 1.0, 1.0])
        feature, threshold, _ = best_split(x, y, [1, 0])
        self.assertEqual((feature, threshold), (0, 1.5))
        x = np.array([[0.0], [1.0], [2.0]])
        feature, threshold, _ = best_split(x, np.array([0.0, 1.0, 0.0]), [0])
        self.assertEqual(threshold, 0.5)

    def test_min_samples_leaf_respected(self):
        x = np.arange(10.0)[:, None]
        y = np.r_[np.zeros(9), 10.0]
        _, threshold, _ = best_split(x, y, [0], min_samples_leaf=3)
        self.assertEqual(threshold, 6.5)

    def test_no_split_on_constant_feature(self):
        self.assertIsNone(best_split(np.ones((5, 1)), np.arange(5.0), [0]))

    def test_thresholds_are_float32_and_separate(self):
        low = np.array([0.1, 1.0, 1.0 + 1e-12, 1.0])
        high = np.array([0.2, np.nextafter(np.float32(1.0), np.float32(2.0)).item(), 1.0 + 2e-12, 1.0])
        thresholds = split_thresholds(low, high)
        np.testing.assert_array_equal(thresholds[:2], [float(np.float32(0.5 * (0.1 + 0.2))), 1.0])
        self.assertTrue(np.all(np.isnan(thresholds[2:])))
        for lo, hi, threshold in zip(low[:2], high[:2], thresholds[:2]):
            self.assertTrue(lo <= threshold < hi)

    def test_values_no_float32_separates_are_not_split(self):
        x = np.array([[1.0 + 1e-12], [1.0 + 2e-12]])
        self.assertIsNone(best_split(x, np.array([0.0, 1.0]), [0]))


class FitTests(SimpleTestCase):

    def test_constant_target_predicts_exactly(self):
        z = np.random.default_rng(1).normal(size=(40, 4))
        model = rf_fit(z, np.full(40, 3.0), ForestHyper(n_trees=20), seed=3)
        self.assertTrue(np.all(rf_predict_many(model, np.random.default_rng(2).normal(size=(15, 4))) == 3.0))

    def test_leaf_means_are_rounded_to_float32(self):
        model = rf_fit(np.array([[0.0], [1.0]]), np.array([0.1, 0.7]), SINGLE)
        self.assertEqual(sorted(model.trees[0].value[1:]), [float(np.float32(0.1)), float(np.float32(0.7))])

    def test_single_tree_memorizes(self):
        z = np.array([[0.0], [1.0], [2.0]])
        y = np.array([0.0, 1.0, 4.0])
        model = rf_fit(z, y, SINGLE)
        self.assertEqual([rf_predict(model, row) for row in z], [0.0, 1.0, 4.0])

    def test_single_tree_prediction_is_path_leaf(self):
        rng = np.random.default_rng(4)
        z, y = rng.normal(size=(30, 3)), rng.normal(size=30)
        model = rf_fit(z, y, ForestHyper(n_trees=1, min_samples_leaf=3), seed=1)
        tree = model.trees[0]
        query = rng.normal(size=3)
        node = 0
        while tree.feature[node] != LEAF:
            node = tree.left[node] if query[tree.feature[node]] <= tree.threshold[node] else tree.right[node]
        self.assertEqual(rf_predict(model, query), tree.value[node])

    def test_predictions_within_target_range(self):
        rng = np.random.default_rng(5)
        z, y = rng.normal(size=(60, 5)), rng.uniform(1, 2, size=60)
        model = rf_fit(z, y, ForestHyper(n_trees=30), seed=2)
        predictions = rf_predict_many(model, rng.normal(scale=5, size=(100, 5)))
        self.assertTrue(np.all(predictions >= y.min() - 1e-12))
        self.assertTrue(np.all(predictions <= y.max() + 1e-12))

    def test_linear_target_generalizes(self):
        rng = np.random.default_rng(42)
        z = rng.uniform(-1, 1, size=(750, 8))
        y = z.sum(axis=1)
        model = rf_fit(z[:500], y[:500], seed=42)
        self.assertEqual(len(model.trees), 200)
        self.assertGreaterEqual(r2(y[500:], rf_predict_many(model, z[500:])), 0.8)

    def test_depth_limit(self):
        rng = np.random.default_rng(6)
        model = rf_fit(rng.normal(size=(50, 2)), rng.normal(size=50), ForestHyper(n_trees=1, max_depth=1), seed=0)
        self.assertEqual(model.trees[0].n_nodes, 3)

    def test_errors(self):
        with self.assertRaises(DatasetError):
            rf_fit(np.zeros((1, 2)), np.zeros(1))
        with self.assertRaises(NonFiniteError):
            rf_fit(np.array([[0.0], [np.nan]]), np.zeros(2))
        model = rf_fit(np.random.default_rng(7).normal(size=(10, 3)), np.arange(10.0), ForestHyper(n_trees=2))
        with self.assertRaises(ShapeError):
            rf_predict(model, np.zeros(4))

    def test_auto_max_features(self):
        self.assertEqual(ForestHyper().features_for(64), 22)
        self.assertEqual(ForestHyper().features_for(2), 1)
        self.assertEqual(ForestHyper(max_features=5).features_for(3), 3)


class DeterminismAndPersistenceTests(SimpleTestCase):

    def setUp(self):
        rng = np.random.default_rng(8)
        self.z, self.y = rng.normal(size=(80, 6)), rng.normal(size=80)
        self.hyper = ForestHyper(n_trees=12)

    def test_thread_count_does_not_change_bytes(self):
        with tempfile.TemporaryDirectory() as tmp:
            save_forest(rf_fit(self.z, self.y, self.hyper, seed=9, threads=1), Path(tmp) / 'a')
            save_forest(rf_fit(self.z, self.y, self.hyper, seed=9, threads=4), Path(tmp) / 'b')
            self.assertEqual(tree_digest(Path(tmp) / 'a'), tree_digest(Path(tmp) / 'b'))

    def test_seed_changes_trees(self):
        first = rf_fit(self.z, self.y, self.hyper, seed=1)
        second = rf_fit(self.z, self.y, self.hyper, seed=2)
        self.assertNotEqual(first.trees[0].encode(), second.trees[0].encode())

    def test_roundtrip_predicts_identically(self):
        model = rf_fit(self.z, self.y, self.hyper, seed=10)
        with tempfile.TemporaryDirectory() as tmp:
            save_forest(model, tmp)
            loaded = load_forest(tmp)
        self.assertEqual(loaded.hyper, model.hyper)
        np.testing.assert_array_equal(rf_predict_many(loaded, self.z), rf_predict_many(model, self.z))

    def test_node_record_layout(self):
        model = rf_fit(np.array([[0.0], [1.0], [2.0]]), np.array([0.0, 1.0, 4.0]), SINGLE)
        data = model.trees[0].encode()
        self.assertEqual(data[:4], b'TRE1')
        self.assertEqual(struct.unpack_from('<II', data, 4), (1, model.trees[0].n_nodes))
        self.assertEqual(NODE_RECORD.itemsize, 24)
        self.assertEqual(len(data), 12 + model.trees[0].n_nodes * 24)
        root = np.frombuffer(data, dtype=NODE_RECORD, count=1, offset=12)[0]
        self.assertEqual((int(root['feature']), float(root['threshold']), int(root['count'])), (0, 1.5, 3))
        decoded = RegressionTree.decode(data)
        np.testing.assert_array_equal(decoded.left, model.trees[0].left)
