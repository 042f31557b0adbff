import tempfile
from dataclasses import replace

import numpy as np
from django.test import SimpleTestCase, tag

from numcore.errors import DatasetError, DivergenceError, PdsmError, ShapeError
from numcore.models import ImageVolume

from .layers import backward, forward, mse_loss
from .models import (
    FEATURE_WIDTH, Architecture, FeatureDataset, LabeledImage, TaskNetwork, TrainConfig,
    initial_params, load_network, save_network,
)
from .training import (
    evaluate_mse, extract_features, extract_many, finetune, pooled_activations, predict_qsteatosis, pretrain,
)

SMALL = Architecture(size=16)


def make_dataset(n, size=16, seed=0, targets=None):
    rng = np.random.default_rng(seed)
    items = []
    for i in range(n):
        volume = ImageVolume(rng.uniform(0, 1, size=(6, size, size)).astype(np.float32), image_id=f'img-{i:03d}')
        target = float(targets[i]) if targets is not None else float(rng.uniform(0, 4))
        items.append(LabeledImage(image_id=volume.image_id, target=target, volume=volume))
    return FeatureDataset(items)


def network(architecture=SMALL, seed=0, **kwargs):
    return TaskNetwork(architecture=architecture, params=initial_params(architecture, seed), seed=seed, **kwargs)


class ArchitectureTests(SimpleTestCase):

    def test_default_shapes(self):
        shapes = Architecture().parameter_shapes()
        self.assertEqual(shapes['conv1.weight'], (16, 6, 3, 3))
        self.assertEqual(shapes['conv3.weight'], (64, 32, 3, 3))
        self.assertEqual(shapes['fc.weight'], (FEATURE_WIDTH, 64))
        self.assertEqual(shapes['head.weight'], (1, 512))

    def test_size_must_survive_pooling(self):
        with self.assertRaises(PdsmError):
            Architecture(size=20)

    def test_bias_free_has_head_bias_only(self):
        shapes = Architecture(use_bias=False).parameter_shapes()
        self.assertEqual([name for name in shapes if name.endswith('.bias')], ['head.bias'])

    def test_parameters_are_read_only(self):
        net = network()
        with self.assertRaises(ValueError):
            net.params['fc.weight'][0, 0] = 1.0

    def test_wrong_parameter_shape(self):
        params = initial_params(SMALL, 0)
        params['fc.weight'] = np.zeros((10, 64), dtype=np.float32)
        with self.assertRaises(ShapeError):
            TaskNetwork(architecture=SMALL, params=params)

    def test_invalid_train_config(self):
        for kwargs in ({'epochs': -1}, {'learning_rate': 0.0}, {'batch_size': 0}):
            with self.assertRaises(PdsmError):
                TrainConfig(**kwargs)


class GradientTests(SimpleTestCase):
    """Analytic gradients against central differences, float64."""

    def check(self, architecture, batch, samples_per_tensor, seed):
        """samples_per_tensor=None checks every entry of every parameter."""
        rng = np.random.default_rng(seed)
        params = initial_params(architecture, seed, dtype=np.float64)
        for name in params:
            if name.endswith('.bias'):
                params[name] = rng.normal(0, 0.1, size=params[name].shape)
        x = rng.normal(size=(batch,) + architecture.input_shape)
        targets = rng.normal(size=batch)

        def loss_of(p):
            outputs, _, _ = forward(p, architecture, x)
            return mse_loss(outputs, targets)[0]

        outputs, _, cache = forward(params, architecture, x, keep_cache=True)
        _, grad_outputs = mse_loss(outputs, targets)
        grads = backward(params, cache, grad_outputs)
        self.assertEqual(set(grads), set(params))

        step = 1e-6
        for name, value in params.items():
            flat = value.reshape(-1)
            if samples_per_tensor is None:
                picks = range(flat.size)
            else:
                picks = rng.choice(flat.size, size=min(samples_per_tensor, flat.size), replace=False)
            for index in picks:
                original = flat[index]
                flat[index] = original + step
                up = loss_of(params)
                flat[index] = original - step
                down = loss_of(params)
                flat[index] = original
                numeric = (up - down) / (2 * step)
                analytic = grads[name].reshape(-1)[index]
                np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-8, err_msg=f'{name}[{index}]')

    def test_small_network(self):
        self.check(Architecture(echoes=2, size=8, block_channels=(3, 4, 5)), batch=3, samples_per_tensor=12, seed=1)

    def test_default_network(self):
        self.check(Architecture(), batch=1, samples_per_tensor=3, seed=2)

    @tag('slow')
    def test_every_parameter_of_default_blocks(self):
        self.check(Architecture(size=8), batch=1, samples_per_tensor=None, seed=3)


class ForwardTests(SimpleTestCase):

    def test_zeroed_head_outputs_bias(self):
        net = network()
        params = net.copy_params()
        params['head.weight'][:] = 0
        params['head.bias'][:] = 0.7
        net = replace(net, params=params)
        image = make_dataset(1).items[0].load()
        self.assertAlmostEqual(predict_qsteatosis(net, image), 0.7, places=6)

    def test_prediction_matches_features_through_head(self):
        net = network(target_mean=1.5, target_std=0.8)
        for item in make_dataset(5, seed=3):
            image = item.load()
            features = extract_features(net, image).values
            expected = float(net.output_weights @ features) + net.output_bias
            self.assertAlmostEqual(predict_qsteatosis(net, image), expected, delta=1e-5)

    def test_feature_vector(self):
        net = network()
        image = make_dataset(1).items[0].load()
        features = extract_features(net, image)
        self.assertEqual(features.values.shape, (512,))
        self.assertEqual(features.image_id, 'img-000')
        self.assertEqual(features.lineage, 'pretrained')
        self.assertTrue(np.all(features.values >= 0))

    def test_zero_image_bias_free_gives_zero_features(self):
        architecture = Architecture(size=16, use_bias=False)
        image = ImageVolume(np.zeros((6, 16, 16), dtype=np.float32))
        self.assertFalse(np.any(extract_features(network(architecture), image).values))

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeError) as ctx:
            predict_qsteatosis(network(), ImageVolume(np.zeros((6, 32, 32), dtype=np.float32)))
        self.assertEqual(ctx.exception.axis, 'height')
        with self.assertRaises(ShapeError) as ctx:
            extract_features(network(), ImageVolume(np.zeros((4, 16, 16), dtype=np.float32)))
        self.assertEqual(ctx.exception.axis, 'channels')

    def test_deterministic(self):
        net = network()
        image = make_dataset(1).items[0].load()
        self.assertEqual(predict_qsteatosis(net, image), predict_qsteatosis(net, image))

    def test_pooled_activations_are_positively_homogeneous(self):
        architecture = Architecture(size=16, use_bias=False)
        net = network(architecture).astype(np.float64)
        values = np.random.default_rng(4).uniform(0, 1, size=(6, 16, 16))
        base = pooled_activations(net, ImageVolume(values))
        for alpha in (0.5, 2.5):
            scaled = pooled_activations(net, ImageVolume(alpha * values))
            np.testing.assert_allclose(scaled, alpha * base, rtol=1e-5, atol=1e-12)

    def test_extract_many_matches_single(self):
        net = network()
        images = [item.load() for item in make_dataset(20, seed=5)]
        rows = extract_many(net, images)
        self.assertEqual(rows.shape, (20, 512))
        np.testing.assert_allclose(rows[7], extract_features(net, images[7]).values, atol=1e-6)
        self.assertEqual(extract_many(net, []).shape, (0, 512))


class PretrainTests(SimpleTestCase):

    def test_zero_epochs_returns_initialization(self):
        net = pretrain(make_dataset(6), TrainConfig(epochs=0, seed=7), SMALL)
        init = initial_params(SMALL, 7)
        for name, value in init.items():
            np.testing.assert_array_equal(net.params[name], value)

    def test_empty_dataset(self):
        with self.assertRaises(DatasetError):
            pretrain(FeatureDataset(()), TrainConfig(), SMALL)

    def test_non_finite_target_rejected(self):
        with self.assertRaises(PdsmError):
            make_dataset(3, targets=[1.0, float('nan'), 2.0])

    def test_standardization_constants(self):
        data = make_dataset(4, targets=[1.0, 2.0, 3.0, 4.0])
        net = pretrain(data, TrainConfig(epochs=0), SMALL)
        self.assertEqual(net.target_mean, 2.5)
        self.assertAlmostEqual(net.target_std, np.std([1.0, 2.0, 3.0, 4.0]))

    def test_constant_target_converges(self):
        data = make_dataset(32, seed=8, targets=[2.0] * 32)
        net = pretrain(data, TrainConfig(epochs=50, seed=3), SMALL)
        self.assertEqual(net.target_std, 1.0)
        self.assertLess(net.final_loss, 0.01)
        for item in list(data)[:5]:
            self.assertLess(abs(predict_qsteatosis(net, item.load()) - 2.0), 0.2)

    def test_deterministic(self):
        data = make_dataset(10, seed=9)
        config = TrainConfig(epochs=3, seed=11)
        self.assertEqual(pretrain(data, config, SMALL).snapshot(), pretrain(data, config, SMALL).snapshot())

    def test_storage_order_does_not_matter(self):
        data = make_dataset(10, seed=10)
        config = TrainConfig(epochs=3, batch_size=3, seed=12)
        reversed_data = data.with_items(reversed(data.items))
        self.assertEqual(pretrain(data, config, SMALL).snapshot(), pretrain(reversed_data, config, SMALL).snapshot())

    def test_divergence_names_epoch(self):
        data = make_dataset(8, seed=13)
        with self.assertRaises(DivergenceError) as ctx:
            with np.errstate(all='ignore'):
                pretrain(data, TrainConfig(epochs=50, learning_rate=1e6, seed=1), SMALL)
        self.assertGreaterEqual(ctx.exception.epoch, 1)


class FinetuneTests(SimpleTestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.data = make_dataset(12, seed=14)
        cls.base = pretrain(cls.data, TrainConfig(epochs=2, seed=5), SMALL)

    def test_zero_epochs_keeps_weights(self):
        tuned = finetune(self.base, self.data, TrainConfig(epochs=0), domain=0)
        self.assertEqual(tuned.snapshot(), self.base.snapshot())
        self.assertFalse(tuned.fallback)
        self.assertEqual(tuned.lineage_tag, 'finetuned(1)')

    def test_base_is_not_mutated(self):
        before = self.base.snapshot()
        tuned = finetune(self.base, self.data, TrainConfig(epochs=2, learning_rate=0.002), domain=2)
        self.assertEqual(self.base.snapshot(), before)
        self.assertNotEqual(tuned.snapshot(), before)
        self.assertEqual(tuned.domain, 2)
        self.assertEqual(tuned.target_mean, self.base.target_mean)

    def test_small_subset_falls_back(self):
        small = self.data.with_items(self.data.items[:2])
        with self.assertLogs('taskmodel', level='WARNING'):
            tuned = finetune(self.base, small, TrainConfig(epochs=5), domain=1, min_samples=4)
        self.assertTrue(tuned.fallback)
        self.assertEqual(tuned.snapshot(), self.base.snapshot())

    def test_finetuning_lowers_error_on_its_subset(self):
        shifted = FeatureDataset(
            replace(item, volume=ImageVolume(item.load().values * 1.3 + 0.2, image_id=item.image_id))
            for item in self.data
        )
        before = evaluate_mse(self.base, shifted)
        tuned = finetune(self.base, shifted, TrainConfig(epochs=30, learning_rate=0.002, seed=2), domain=0)
        self.assertLess(evaluate_mse(tuned, shifted), before)


class PersistenceTests(SimpleTestCase):

    def test_roundtrip(self):
        data = make_dataset(6, seed=15)
        net = pretrain(data, TrainConfig(epochs=1, seed=4), SMALL)
        tuned = finetune(net, data, TrainConfig(epochs=1), domain=3)
        with tempfile.TemporaryDirectory() as tmp:
            save_network(tuned, tmp)
            loaded = load_network(tmp)
        self.assertEqual(loaded.snapshot(), tuned.snapshot())
        self.assertEqual(loaded.lineage_tag, 'finetuned(4)')
        self.assertEqual(loaded.target_mean, tuned.target_mean)
        self.assertEqual(loaded.architecture, tuned.architecture)
        image = data.items[0].load()
        self.assertEqual(predict_qsteatosis(loaded, image), predict_qsteatosis(tuned, image))
