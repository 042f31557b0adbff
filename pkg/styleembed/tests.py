import tempfile

import numpy as np
from django.test import SimpleTestCase
from hypothesis import given, settings, strategies as st

from numcore.errors import PdsmError, ShapeError
from numcore.linalg import sym_eig
from numcore.models import ImageVolume, Tensor3

from .embedding import embed_many, gram_matrix, style_embedding, style_forward
from .models import StyleModel, load_style_model, save_style_model


def random_image(seed, channels=6, size=64):
    rng = np.random.default_rng(seed)
    return ImageVolume(rng.uniform(0.0, 1.0, size=(channels, size, size)).astype(np.float32), image_id=f'img-{seed}')


class StyleForwardTests(SimpleTestCase):

    def setUp(self):
        self.model = StyleModel.random(seed=3, in_channels=6)

    def test_default_map_shapes(self):
        maps = style_forward(self.model, random_image(0))
        self.assertEqual([m.shape for m in maps], [(8, 30, 30), (16, 14, 14)])

    def test_zero_image_gives_zero_maps(self):
        maps = style_forward(self.model, ImageVolume(np.zeros((6, 64, 64), dtype=np.float32)))
        for feature_map in maps:
            self.assertFalse(np.any(feature_map.values))

    def test_deterministic(self):
        image = random_image(1)
        first = style_forward(StyleModel.random(seed=3, in_channels=6), image)
        second = style_forward(self.model, image)
        for a, b in zip(first, second):
            self.assertEqual(a.values.tobytes(), b.values.tobytes())

    def test_channel_mismatch(self):
        with self.assertRaises(ShapeError):
            style_forward(self.model, random_image(2, channels=3))

    def test_selected_layer_validation(self):
        with self.assertRaises(PdsmError):
            StyleModel(self.model.layers, (3,))
        with self.assertRaises(PdsmError):
            StyleModel(self.model.layers, ())

    def test_weights_are_read_only(self):
        with self.assertRaises(ValueError):
            self.model.layers[0].kernels[0, 0, 0, 0] = 1.0


class GramMatrixTests(SimpleTestCase):

    def test_zero_map(self):
        gram = gram_matrix(Tensor3(np.zeros((3, 4, 5))))
        self.assertFalse(np.any(gram.matrix))

    def test_constant_single_channel(self):
        for h, w in [(1, 1), (3, 7), (10, 10)]:
            gram = gram_matrix(Tensor3(np.ones((1, h, w))))
            np.testing.assert_array_equal(gram.matrix, [[1.0]])

    def test_two_channels_two_positions(self):
        gram = gram_matrix(Tensor3(np.array([[[1.0, 2.0]], [[3.0, 4.0]]])))
        np.testing.assert_allclose(gram.matrix, [[2.5, 5.5], [5.5, 12.5]])

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2 ** 32 - 1))
    def test_permutation_invariance_is_exact(self, seed):
        rng = np.random.default_rng(seed)
        values = rng.normal(size=(4, 5, 6))
        flat = values.reshape(4, -1)
        shuffled = flat[:, rng.permutation(30)].reshape(4, 5, 6)
        first = gram_matrix(Tensor3(values)).matrix
        second = gram_matrix(Tensor3(shuffled)).matrix
        self.assertEqual(first.tobytes(), second.tobytes())

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2 ** 32 - 1), alpha=st.floats(0.1, 10.0))
    def test_quadratic_scaling(self, seed, alpha):
        values = np.random.default_rng(seed).normal(size=(3, 4, 4))
        base = gram_matrix(Tensor3(values)).matrix
        scaled = gram_matrix(Tensor3(alpha * values)).matrix
        np.testing.assert_allclose(scaled, alpha ** 2 * base, rtol=1e-6)

    def test_symmetric_and_psd_on_random_images(self):
        model = StyleModel.random(seed=11, in_channels=6)
        for seed in range(100):
            for number, feature_map in zip(model.selected_layers, style_forward(model, random_image(seed, size=32))):
                matrix = gram_matrix(feature_map, layer=number).matrix
                np.testing.assert_array_equal(matrix, matrix.T)
                eigenvalues, _ = sym_eig(matrix)
                self.assertGreaterEqual(eigenvalues[-1], -1e-6 * np.trace(matrix))


class StyleEmbeddingTests(SimpleTestCase):

    def setUp(self):
        self.model = StyleModel.random(seed=5, in_channels=6)

    def test_dimension(self):
        self.assertEqual(self.model.embedding_dimension, 172)
        self.assertEqual(style_embedding(self.model, random_image(0)).dimension, 172)

    def test_dimension_does_not_depend_on_image_size(self):
        self.assertEqual(style_embedding(self.model, random_image(0, size=32)).dimension, 172)

    def test_zero_image(self):
        embedding = style_embedding(self.model, ImageVolume(np.zeros((6, 64, 64), dtype=np.float32)))
        self.assertFalse(np.any(embedding.vector))

    def test_block_norms(self):
        for seed in range(10):
            vector = style_embedding(self.model, random_image(seed)).vector
            for block in (vector[:36], vector[36:]):
                norm = np.linalg.norm(block)
                self.assertTrue(norm == 0 or abs(norm - 1) < 1e-6)

    def test_doubling_intensity_leaves_embedding_unchanged(self):
        image = random_image(7)
        doubled = ImageVolume(image.values * 2)
        np.testing.assert_allclose(
            style_embedding(self.model, doubled).vector,
            style_embedding(self.model, image).vector,
            atol=1e-9,
        )

    def test_keeps_image_id(self):
        self.assertEqual(style_embedding(self.model, random_image(4)).image_id, 'img-4')

    def test_embed_many_matches_serial(self):
        images = [random_image(seed, size=32) for seed in range(6)]
        parallel = embed_many(self.model, images, threads=3)
        for image, embedding in zip(images, parallel):
            self.assertEqual(embedding.vector.tobytes(), style_embedding(self.model, image).vector.tobytes())


class PersistenceTests(SimpleTestCase):

    def test_saved_model_reproduces_embeddings(self):
        model = StyleModel.random(seed=9, in_channels=6)
        with tempfile.TemporaryDirectory() as tmp:
            save_style_model(model, tmp)
            loaded = load_style_model(tmp)
        self.assertEqual(loaded.selected_layers, model.selected_layers)
        self.assertEqual(loaded.provenance, model.provenance)
        image = random_image(1)
        np.testing.assert_array_equal(style_embedding(loaded, image).vector, style_embedding(model, image).vector)

    def test_layer_selection_override(self):
        model = StyleModel.random(seed=9, in_channels=6)
        with tempfile.TemporaryDirectory() as tmp:
            save_style_model(model, tmp)
            loaded = load_style_model(tmp, selected_layers=(2,))
        self.assertEqual(loaded.embedding_dimension, 136)
