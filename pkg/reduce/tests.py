import tempfile

import numpy as np
from django.test import SimpleTestCase
from hypothesis import given, settings, strategies as st

from numcore.errors import DatasetError, ShapeError
from taskmodel.models import FeatureVector

from .models import load_pca_model, save_pca_model
from .pca import pca_fit, pca_inverse, pca_transform, pca_transform_many


class PcaFitTests(SimpleTestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.rows = np.random.default_rng(0).normal(size=(100, 512))
        cls.model = pca_fit(cls.rows, 32)

    def test_variances_match_explicit_covariance(self):
        covariance = np.cov(self.rows, rowvar=False)
        expected = np.sort(np.linalg.eigvalsh(covariance))[::-1][:32]
        self.assertEqual(self.model.m, 32)
        np.testing.assert_allclose(self.model.variances, expected, atol=1e-6)

    def test_components_orthonormal(self):
        self.assertLess(self.model.orthonormality_error(), 1e-6)

    def test_total_variance_below_trace(self):
        trace = np.trace(np.cov(self.rows, rowvar=False))
        self.assertLessEqual(self.model.variances.sum(), trace + 1e-6)

    def test_projection_variance_equals_explained_variance(self):
        z = pca_transform_many(self.model, self.rows)
        np.testing.assert_allclose(z.var(axis=0, ddof=1), self.model.variances, atol=1e-6)

    def test_mean_maps_to_zero(self):
        z = pca_transform(self.model, FeatureVector(self.model.mean.copy(), image_id='m'))
        np.testing.assert_allclose(z.values, np.zeros(32), atol=1e-12)
        self.assertEqual(z.image_id, 'm')

    def test_batch_matches_single(self):
        z = pca_transform_many(self.model, self.rows[:3])
        np.testing.assert_allclose(z[1], pca_transform(self.model, self.rows[1]).values, atol=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(a=st.floats(-2, 2), i=st.integers(0, 99), j=st.integers(0, 99))
    def test_transform_is_affine(self, a, i, j):
        f1, f2 = self.rows[i], self.rows[j]
        lhs = pca_transform(self.model, a * f1 + (1 - a) * f2).values
        rhs = a * pca_transform(self.model, f1).values + (1 - a) * pca_transform(self.model, f2).values
        np.testing.assert_allclose(lhs, rhs, atol=1e-6)

    def test_dimension_mismatch(self):
        with self.assertRaises(ShapeError):
            pca_transform(self.model, np.zeros(100))
        with self.assertRaises(ShapeError):
            pca_inverse(self.model, np.zeros(5))


class PcaEdgeTests(SimpleTestCase):

    def test_full_rank_roundtrip(self):
        rows = np.random.default_rng(1).normal(size=(600, 512))
        model = pca_fit(rows, 512)
        self.assertEqual(model.m, 512)
        restored = pca_inverse(model, pca_transform_many(model, rows[:10]))
        self.assertLess(np.max(np.abs(restored - rows[:10])), 1e-5)

    def test_rank_one_data(self):
        rng = np.random.default_rng(2)
        direction = rng.normal(size=512)
        rows = rng.normal(size=(20, 1)) * direction + rng.normal(size=512)
        model = pca_fit(rows, 32)
        self.assertEqual(model.m, 19)
        self.assertGreater(model.variances[0], 0)
        self.assertTrue(np.all(model.variances[1:] < 1e-9))

    def test_rank_cap(self):
        model = pca_fit(np.random.default_rng(3).normal(size=(10, 16)), 32)
        self.assertEqual(model.m, 9)
        self.assertEqual(model.dimension, 16)

    def test_too_few_rows(self):
        with self.assertRaises(DatasetError):
            pca_fit(np.zeros((1, 8)))

    def test_deterministic_signs(self):
        rows = np.random.default_rng(4).normal(size=(30, 12))
        first, second = pca_fit(rows, 5), pca_fit(rows, 5)
        np.testing.assert_array_equal(first.components, second.components)
        lead = np.argmax(np.abs(first.components), axis=0)
        self.assertTrue(np.all(first.components[lead, np.arange(5)] >= 0))

    def test_week_recorded(self):
        model = pca_fit(np.random.default_rng(5).normal(size=(8, 6)), 3)
        self.assertEqual(pca_transform(model, np.ones(6), week=12).week, 12)


class PcaPersistenceTests(SimpleTestCase):

    def test_roundtrip_equals_stored_precision(self):
        model = pca_fit(np.random.default_rng(6).normal(size=(40, 24)), 8)
        with tempfile.TemporaryDirectory() as tmp:
            save_pca_model(model, tmp)
            loaded = load_pca_model(tmp)
        stored = model.as_stored()
        for name in ('mean', 'components', 'variances'):
            np.testing.assert_array_equal(getattr(loaded, name), getattr(stored, name))
        self.assertEqual(loaded.n_samples, 40)
