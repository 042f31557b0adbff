import itertools
import tempfile

import numpy as np
from django.test import SimpleTestCase

from numcore.errors import DatasetError, NonFiniteError, ShapeError
from styleembed.models import StyleEmbedding
from taskmodel.models import FeatureDataset, LabeledImage

from .kmeans import assign, cluster_composition, kmeans_fit, partition_dataset, squared_distances
from .models import ClusterModel, load_cluster_model, save_cluster_model


def exhaustive_optimum(points, k):
    """Best inertia over every assignment of points to k non-empty clusters."""
    best = np.inf
    n = len(points)
    for labels in itertools.product(range(k), repeat=n):
        if len(set(labels)) != k:
            continue
        labels = np.array(labels)
        total = 0.0
        for j in range(k):
            members = points[labels == j]
            total += float(((members - members.mean(axis=0)) ** 2).sum())
        best = min(best, total)
    return best


class KmeansFitTests(SimpleTestCase):

    def test_k_equals_n(self):
        points = np.random.default_rng(0).normal(size=(6, 3))
        model = kmeans_fit(points, k=6, seed=1)
        self.assertEqual(model.inertia, 0.0)
        self.assertEqual(sorted(map(tuple, model.centroids)), sorted(map(tuple, points)))

    def test_single_cluster_is_the_mean(self):
        points = np.random.default_rng(1).normal(size=(20, 4))
        model = kmeans_fit(points, k=1, seed=1)
        np.testing.assert_allclose(model.centroids[0], points.mean(axis=0), atol=1e-12)

    def test_two_blobs(self):
        rng = np.random.default_rng(2)
        blob_a = rng.normal(0.0, 0.5, size=(20, 2))
        blob_b = rng.normal(10.0, 0.5, size=(20, 2))
        points = np.vstack([blob_a, blob_b])
        model = kmeans_fit(points, k=2, seed=3)
        labels = np.argmin(squared_distances(points, model.centroids), axis=1)
        self.assertEqual(len(set(labels[:20])), 1)
        self.assertEqual(len(set(labels[20:])), 1)
        self.assertNotEqual(labels[0], labels[20])

    def test_too_few_points(self):
        with self.assertRaises(DatasetError):
            kmeans_fit(np.zeros((2, 3)), k=3, seed=0)

    def test_non_finite_rejected(self):
        points = np.zeros((4, 2))
        points[2, 1] = np.nan
        with self.assertRaises(NonFiniteError):
            kmeans_fit(points, k=2, seed=0)

    def test_accepts_embeddings(self):
        embeddings = [StyleEmbedding(np.array([float(i), 0.0]), image_id=str(i)) for i in range(5)]
        self.assertEqual(kmeans_fit(embeddings, k=2, seed=0).dimension, 2)

    def test_thread_count_does_not_change_result(self):
        points = np.random.default_rng(3).normal(size=(40, 5))
        serial = kmeans_fit(points, k=4, seed=9, threads=1)
        threaded = kmeans_fit(points, k=4, seed=9, threads=4)
        self.assertEqual(serial.centroids.tobytes(), threaded.centroids.tobytes())
        self.assertEqual(serial.inertia, threaded.inertia)

    def test_duplicate_points_keep_k_clusters(self):
        points = np.array([[0.0, 0.0]] * 5 + [[1.0, 1.0]])
        model = kmeans_fit(points, k=3, seed=4)
        self.assertEqual(model.centroids.shape, (3, 2))

    def test_matches_exhaustive_optimum_and_trace_is_monotone(self):
        hits = 0
        master = np.random.default_rng(42)
        for instance in range(100):
            n = int(master.integers(3, 9))
            k = int(master.integers(1, min(3, n) + 1))
            points = master.normal(size=(n, 2))
            traces = {}
            model = kmeans_fit(
                points, k=k, seed=instance, restarts=10,
                on_iteration=lambda r, i, v: traces.setdefault(r, []).append(v),
            )
            for trace in traces.values():
                self.assertTrue(all(b <= a + 1e-12 for a, b in zip(trace, trace[1:])))
            if abs(model.inertia - exhaustive_optimum(points, k)) <= 1e-9:
                hits += 1
        self.assertGreaterEqual(hits, 90)


class AssignTests(SimpleTestCase):

    def setUp(self):
        self.model = ClusterModel(3, np.array([[0.0, 0.0], [2.0, 0.0], [5.0, 5.0]]), 0.0, 0)

    def test_exact_centroid(self):
        self.assertEqual(assign(self.model, np.array([5.0, 5.0])), 2)

    def test_tie_goes_to_lower_index(self):
        self.assertEqual(assign(self.model, np.array([1.0, 0.0])), 0)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            point = rng.uniform(-2, 7, size=2)
            expected = min(range(3), key=lambda j: (np.sum((point - self.model.centroids[j]) ** 2), j))
            self.assertEqual(assign(self.model, StyleEmbedding(point)), expected)

    def test_dimension_mismatch(self):
        with self.assertRaises(ShapeError):
            assign(self.model, np.zeros(3))


class PartitionTests(SimpleTestCase):

    def make_dataset(self, count):
        return FeatureDataset(tuple(
            LabeledImage(image_id=f'x{i}', path=f'images/x{i}.tns', target=float(i)) for i in range(count)
        ))

    def test_single_cluster(self):
        dataset = self.make_dataset(4)
        model = ClusterModel(1, np.zeros((1, 2)), 0.0, 0)
        embeddings = {item.image_id: StyleEmbedding(np.ones(2)) for item in dataset}
        (only,) = partition_dataset(dataset, model, embeddings)
        self.assertEqual(only.items, dataset.items)

    def test_empty_dataset(self):
        model = ClusterModel(3, np.zeros((3, 2)), 0.0, 0)
        parts = partition_dataset(self.make_dataset(0), model, {})
        self.assertEqual([len(p) for p in parts], [0, 0, 0])

    def test_disjoint_cover_in_order(self):
        rng = np.random.default_rng(6)
        dataset = self.make_dataset(10)
        model = ClusterModel(3, rng.normal(size=(3, 4)), 0.0, 0)
        embeddings = {item.image_id: StyleEmbedding(rng.normal(size=4)) for item in dataset}
        parts = partition_dataset(dataset, model, embeddings)
        histogram = np.bincount([assign(model, embeddings[item.image_id]) for item in dataset], minlength=3)
        self.assertEqual([len(p) for p in parts], histogram.tolist())
        ids = sorted(item.image_id for part in parts for item in part)
        self.assertEqual(ids, sorted(item.image_id for item in dataset))
        for part in parts:
            order = [int(item.image_id[1:]) for item in part]
            self.assertEqual(order, sorted(order))

    def test_missing_embedding(self):
        dataset = self.make_dataset(3)
        model = ClusterModel(1, np.zeros((1, 2)), 0.0, 0)
        with self.assertRaises(DatasetError) as ctx:
            partition_dataset(dataset, model, {'x0': StyleEmbedding(np.zeros(2))})
        self.assertEqual(ctx.exception.ids, ['x1', 'x2'])


class CompositionAndPersistenceTests(SimpleTestCase):

    def test_composition_table(self):
        table = cluster_composition([0, 0, 1, 1, 1], ['a', 'b', 'a', 'a', 'c'])
        self.assertEqual(table, {0: {'a': 1, 'b': 1}, 1: {'a': 2, 'c': 1}})

    def test_roundtrip_equals_stored_precision(self):
        model = kmeans_fit(np.random.default_rng(7).normal(size=(12, 3)), k=3, seed=2)
        with tempfile.TemporaryDirectory() as tmp:
            save_cluster_model(model, tmp)
            loaded = load_cluster_model(tmp)
        np.testing.assert_array_equal(loaded.centroids, model.as_stored().centroids)
        self.assertEqual((loaded.k, loaded.seed, loaded.inertia), (3, 2, model.inertia))
