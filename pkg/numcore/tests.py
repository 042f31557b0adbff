import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from hypothesis import given, settings, strategies as st

from .conv import conv2d_backward, conv2d_backward_batch, conv2d_forward, conv2d_forward_batch
from .errors import ConvergenceError, NotSymmetricError, ShapeError
from .linalg import sym_eig
from .models import DenseMatrix, Tensor3
from .parallel import parallel_map
from .rng import rng_derive, rng_for, rng_stream_key
from .storage import (
    TensorFormatError, atomic_directory, decode_tensor, encode_tensor, load_image, read_tensor, tree_digest, write_tensor,
)


def naive_conv(x, k, stride, padding):
    """Nested-loop reference convolution for one (C, H, W) input."""
    c_out, c_in, k_h, k_w = k.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    out_h = (x.shape[1] + 2 * padding - k_h) // stride + 1
    out_w = (x.shape[2] + 2 * padding - k_w) // stride + 1
    out = np.zeros((c_out, out_h, out_w))
    for o in range(c_out):
        for i in range(out_h):
            for j in range(out_w):
                patch = xp[:, i * stride:i * stride + k_h, j * stride:j * stride + k_w]
                out[o, i, j] = np.sum(patch * k[o])
    return out


class Conv2dForwardTests(SimpleTestCase):

    def test_identity_kernel_returns_input(self):
        x = np.random.default_rng(0).normal(size=(1, 5, 4))
        out = conv2d_forward(Tensor3(x), np.ones((1, 1, 1, 1)))
        np.testing.assert_array_equal(out.values, x)

    def test_zero_input_gives_zero_output(self):
        kernels = np.random.default_rng(1).normal(size=(3, 2, 3, 3))
        out = conv2d_forward(Tensor3(np.zeros((2, 7, 7))), kernels, stride=2, padding=1)
        self.assertFalse(np.any(out.values))

    def test_two_by_two_sum(self):
        out = conv2d_forward(Tensor3(np.array([[[1.0, 2.0], [3.0, 4.0]]])), np.ones((1, 1, 2, 2)))
        self.assertEqual(out.shape, (1, 1, 1))
        self.assertEqual(out.values[0, 0, 0], 10.0)

    def test_output_shape_and_values_match_naive_loops(self):
        rng = np.random.default_rng(2)
        for stride, padding in [(1, 0), (2, 0), (1, 1), (2, 2)]:
            x = rng.normal(size=(3, 9, 8))
            k = rng.normal(size=(4, 3, 3, 2))
            out = conv2d_forward(Tensor3(x), k, stride=stride, padding=padding)
            np.testing.assert_allclose(out.values, naive_conv(x, k, stride, padding), atol=1e-10)

    def test_channel_mismatch_names_axis(self):
        with self.assertRaises(ShapeError) as ctx:
            conv2d_forward(Tensor3(np.zeros((2, 4, 4))), np.zeros((1, 3, 3, 3)))
        self.assertEqual(ctx.exception.axis, 'channels')

    def test_kernel_larger_than_input_names_axis(self):
        with self.assertRaises(ShapeError) as ctx:
            conv2d_forward(Tensor3(np.zeros((1, 2, 6))), np.zeros((1, 1, 3, 3)))
        self.assertEqual(ctx.exception.axis, 'height')

    @settings(max_examples=25, deadline=None)
    @given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2 ** 16))
    def test_linearity(self, a, b, seed):
        rng = np.random.default_rng(seed)
        x, y = rng.normal(size=(2, 2, 6, 6))
        k = rng.normal(size=(3, 2, 3, 3))
        lhs = conv2d_forward(Tensor3(a * x + b * y), k, padding=1).values
        rhs = a * conv2d_forward(Tensor3(x), k, padding=1).values + b * conv2d_forward(Tensor3(y), k, padding=1).values
        np.testing.assert_allclose(lhs, rhs, atol=1e-6)

    def test_pure(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 2, 8, 8)).astype(np.float32)
        k = rng.normal(size=(4, 2, 3, 3)).astype(np.float32)
        first = conv2d_forward_batch(x, k, stride=2, padding=1)
        second = conv2d_forward_batch(x, k, stride=2, padding=1)
        self.assertEqual(first.tobytes(), second.tobytes())


class Conv2dBackwardTests(SimpleTestCase):

    def test_zero_upstream_gradient(self):
        rng = np.random.default_rng(4)
        x = Tensor3(rng.normal(size=(2, 5, 5)))
        k = rng.normal(size=(3, 2, 3, 3))
        grad_in, grad_k = conv2d_backward(Tensor3(np.zeros((3, 3, 3))), x, k)
        self.assertFalse(np.any(grad_in.values))
        self.assertFalse(np.any(grad_k))

    def test_identity_kernel_passes_gradient_through(self):
        g = np.random.default_rng(5).normal(size=(1, 4, 4))
        grad_in, _ = conv2d_backward(Tensor3(g), Tensor3(np.ones((1, 4, 4))), np.ones((1, 1, 1, 1)))
        np.testing.assert_array_equal(grad_in.values, g)

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            conv2d_backward(Tensor3(np.zeros((3, 2, 2))), Tensor3(np.zeros((2, 5, 5))), np.zeros((3, 2, 3, 3)))

    def test_matches_central_differences(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(1, 2, 6, 6))
        k = rng.normal(size=(3, 2, 3, 3))
        bias = rng.normal(size=3)
        weights = rng.normal(size=(1, 3, 6, 6))

        def loss(x_, k_, b_):
            return float(np.sum(weights * conv2d_forward_batch(x_, k_, padding=1, bias=b_)))

        grad_x, grad_k, grad_b = conv2d_backward_batch(weights, x, k, padding=1)
        step = 1e-3
        for target, grad in ((x, grad_x), (k, grad_k), (bias, grad_b)):
            numeric = np.zeros_like(target)
            for idx in np.ndindex(target.shape):
                saved = target[idx]
                target[idx] = saved + step
                up = loss(x, k, bias)
                target[idx] = saved - step
                down = loss(x, k, bias)
                target[idx] = saved
                numeric[idx] = (up - down) / (2 * step)
            rel = np.abs(grad - numeric) / np.maximum(np.abs(numeric) + np.abs(grad), 1e-8)
            self.assertLess(rel.max(), 1e-4)

    def test_strided_gradient_matches_central_differences(self):
        rng = np.random.default_rng(7)
        x = Tensor3(rng.normal(size=(2, 7, 7)))
        k = rng.normal(size=(2, 2, 3, 3))
        upstream = rng.normal(size=(2, 3, 3))
        grad_in, grad_k = conv2d_backward(Tensor3(upstream), x, k, stride=2)
        values = np.array(x.values)
        step = 1e-3
        for idx in [(0, 0, 0), (1, 3, 4), (0, 6, 6), (1, 2, 1)]:
            up, down = values.copy(), values.copy()
            up[idx] += step
            down[idx] -= step
            numeric = (np.sum(upstream * conv2d_forward(Tensor3(up), k, stride=2).values)
                       - np.sum(upstream * conv2d_forward(Tensor3(down), k, stride=2).values)) / (2 * step)
            self.assertAlmostEqual(grad_in.values[idx], numeric, places=6)


class SymEigTests(SimpleTestCase):

    def test_identity(self):
        values, vectors = sym_eig(np.eye(3))
        np.testing.assert_allclose(values, [1, 1, 1])
        np.testing.assert_allclose(vectors.T @ vectors, np.eye(3), atol=1e-12)

    def test_diagonal(self):
        values, vectors = sym_eig(DenseMatrix(np.diag([3.0, 1.0])))
        np.testing.assert_allclose(values, [3, 1])
        np.testing.assert_allclose(vectors, np.eye(2))

    def test_unsorted_diagonal_is_sorted_descending(self):
        values, vectors = sym_eig(np.diag([1.0, 5.0, 2.0]))
        np.testing.assert_allclose(values, [5, 2, 1])
        np.testing.assert_allclose(np.abs(vectors[:, 0]), [0, 1, 0])

    def test_random_reconstruction(self):
        rng = np.random.default_rng(8)
        for n in (2, 5, 8, 13):
            a = rng.normal(size=(n, n))
            m = a + a.T
            values, vectors = sym_eig(m)
            recon = vectors @ np.diag(values) @ vectors.T
            self.assertLess(np.linalg.norm(recon - m) / np.linalg.norm(m), 1e-6)
            self.assertLess(np.abs(vectors.T @ vectors - np.eye(n)).max(), 1e-6)
            self.assertTrue(np.all(np.diff(values) <= 0))
            np.testing.assert_allclose(values, np.sort(np.linalg.eigvalsh(m))[::-1], atol=1e-9)

    def test_sign_convention(self):
        rng = np.random.default_rng(9)
        a = rng.normal(size=(6, 6))
        _, vectors = sym_eig(a @ a.T)
        lead = vectors[np.argmax(np.abs(vectors), axis=0), np.arange(6)]
        self.assertTrue(np.all(lead >= 0))

    def test_non_symmetric_rejected(self):
        with self.assertRaises(NotSymmetricError):
            sym_eig(np.array([[1.0, 2.0], [0.0, 1.0]]))

    def test_iteration_cap(self):
        rng = np.random.default_rng(10)
        a = rng.normal(size=(6, 6))
        with self.assertRaises(ConvergenceError) as ctx:
            sym_eig(a + a.T, max_sweeps=0)
        self.assertGreater(ctx.exception.residual, 0)

    def test_pure(self):
        rng = np.random.default_rng(11)
        a = rng.normal(size=(7, 7))
        first = sym_eig(a + a.T)
        second = sym_eig(a + a.T)
        self.assertEqual(first[0].tobytes(), second[0].tobytes())
        self.assertEqual(first[1].tobytes(), second[1].tobytes())


class RngTests(SimpleTestCase):

    def test_same_pair_same_sequence(self):
        first = rng_derive(42, 0).random(100)
        second = rng_derive(42, 0).random(100)
        self.assertEqual(first.tobytes(), second.tobytes())

    def test_different_streams_differ(self):
        self.assertFalse(np.array_equal(rng_derive(42, 0).random(16), rng_derive(42, 1).random(16)))

    def test_fresh_restarts_the_stream(self):
        rng = rng_derive(42, 7)
        first = rng.random(8)
        np.testing.assert_array_equal(rng.fresh().random(8), first)

    def test_stream_key_is_stable(self):
        self.assertEqual(rng_stream_key('patient', 3), rng_stream_key('patient', 3))
        self.assertNotEqual(rng_stream_key('patient', 3), rng_stream_key('patient', 4))
        self.assertNotEqual(rng_stream_key('patient', 3), rng_stream_key('site', 3))
        np.testing.assert_array_equal(rng_for(1, 'tree', 2).random(4), rng_for(1, 'tree', 2).random(4))


class StorageTests(SimpleTestCase):

    def test_tensor_file_layout(self):
        data = encode_tensor(np.arange(6, dtype=np.float32).reshape(2, 3))
        self.assertEqual(data[:4], b'TNS1')
        self.assertEqual(int.from_bytes(data[4:8], 'little'), 2)
        self.assertEqual(int.from_bytes(data[8:12], 'little'), 2)
        self.assertEqual(int.from_bytes(data[12:16], 'little'), 3)
        self.assertEqual(len(data), 16 + 6 * 4)
        np.testing.assert_array_equal(decode_tensor(data), np.arange(6).reshape(2, 3))

    def test_file_roundtrip(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'x.tns'
            array = np.random.default_rng(12).normal(size=(2, 3, 4)).astype(np.float32)
            write_tensor(path, array)
            np.testing.assert_array_equal(read_tensor(path), array)

    def test_truncated_header_is_a_format_error(self):
        data = encode_tensor(np.zeros((2, 3)))
        for cut in (5, 9, 12):
            with self.assertRaises(TensorFormatError):
                decode_tensor(data[:cut])
        with self.assertRaises(TensorFormatError):
            decode_tensor(b'TNS1' + (1000).to_bytes(4, 'little') + bytes(8))

    def test_load_image_sees_rewrites(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'image.tns'
            write_tensor(path, np.zeros((1, 4, 4)))
            self.assertEqual(load_image(path).values.max(), 0.0)
            write_tensor(path, np.ones((1, 4, 4)))
            self.assertEqual(load_image(path).values.max(), 1.0)
            # rewritten behind the writer's back, with a new size
            path.write_bytes(encode_tensor(np.full((1, 2, 2), 2.0)))
            self.assertEqual(load_image(path).values.max(), 2.0)

    def test_atomic_directory_leaves_nothing_on_failure(self):
        with tempfile.TemporaryDirectory() as tmp:
            target = Path(tmp) / 'bundle'
            with self.assertRaises(RuntimeError):
                with atomic_directory(target) as staging:
                    (staging / 'partial').write_text('x')
                    raise RuntimeError('boom')
            self.assertFalse(target.exists())
            self.assertEqual(list(Path(tmp).iterdir()), [])

    def test_atomic_directory_replaces_target(self):
        with tempfile.TemporaryDirectory() as tmp:
            target = Path(tmp) / 'bundle'
            for text in ('one', 'two'):
                with atomic_directory(target) as staging:
                    (staging / 'file').write_text(text)
            self.assertEqual((target / 'file').read_text(), 'two')
            self.assertEqual(len(tree_digest(target)), 64)


class ParallelMapTests(SimpleTestCase):

    def test_order_preserved_for_any_thread_count(self):
        def work(i):
            return rng_derive(5, i).random()

        serial = parallel_map(work, range(20), threads=1)
        self.assertEqual(parallel_map(work, range(20), threads=4), serial)
