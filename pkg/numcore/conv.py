"""
2-D convolution, forward and backward, with zero padding and no dilation.

The batched functions work on (N, C, H, W) arrays and are what the training
loop uses; conv2d_forward / conv2d_backward are the single-tensor forms.
Arithmetic follows the dtype of the inputs, so float64 arrays give the
high-precision path used by gradient checks.
"""

import numpy as np

from .errors import ShapeError
from .models import Tensor3


def output_extent(extent, kernel, stride, padding):
    """floor((extent + 2*padding - kernel) / stride) + 1"""
    return (extent + 2 * padding - kernel) // stride + 1


def _check_bank(kernels, channels, height, width, padding, where):
    if kernels.ndim != 4:
        raise ShapeError('kernel rank', 4, kernels.ndim, where)
    _, c_in, k_h, k_w = kernels.shape
    if channels != c_in:
        raise ShapeError('channels', c_in, channels, where)
    if k_h > height + 2 * padding:
        raise ShapeError('height', f'>= {k_h}', height + 2 * padding, where)
    if k_w > width + 2 * padding:
        raise ShapeError('width', f'>= {k_w}', width + 2 * padding, where)


def _pad(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def im2col(x_padded, k_h, k_w, stride, out_h, out_w):
    """Unfold patches into an (N, C*k_h*k_w, out_h*out_w) matrix."""
    n, c = x_padded.shape[:2]
    cols = np.empty((n, c, k_h, k_w, out_h, out_w), dtype=x_padded.dtype)
    for i in range(k_h):
        i_end = i + stride * (out_h - 1) + 1
        for j in range(k_w):
            j_end = j + stride * (out_w - 1) + 1
            cols[:, :, i, j] = x_padded[:, :, i:i_end:stride, j:j_end:stride]
    return cols.reshape(n, c * k_h * k_w, out_h * out_w)


def col2im(cols, padded_shape, k_h, k_w, stride, out_h, out_w):
    """Adjoint of im2col: scatter-add patch gradients back to the padded input."""
    n, c = padded_shape[:2]
    cols = cols.reshape(n, c, k_h, k_w, out_h, out_w)
    x_padded = np.zeros(padded_shape, dtype=cols.dtype)
    for i in range(k_h):
        i_end = i + stride * (out_h - 1) + 1
        for j in range(k_w):
            j_end = j + stride * (out_w - 1) + 1
            x_padded[:, :, i:i_end:stride, j:j_end:stride] += cols[:, :, i, j]
    return x_padded


def conv2d_forward_batch(x, kernels, stride=1, padding=0, bias=None, return_cols=False):
    """
    Convolve a batch (N, C_in, H, W) with a bank (C_out, C_in, k_h, k_w).

    Returns (N, C_out, H_out, W_out); with return_cols=True also returns the
    unfolded input so a later backward call can skip the unfold.
    """
    if x.ndim != 4:
        raise ShapeError('input rank', 4, x.ndim, 'conv2d_forward')
    n, c, h, w = x.shape
    _check_bank(kernels, c, h, w, padding, 'conv2d_forward')
    c_out, _, k_h, k_w = kernels.shape
    out_h = output_extent(h, k_h, stride, padding)
    out_w = output_extent(w, k_w, stride, padding)

    cols = im2col(_pad(x, padding), k_h, k_w, stride, out_h, out_w)
    out = np.matmul(kernels.reshape(c_out, -1), cols)
    if bias is not None:
        out = out + bias.reshape(1, c_out, 1)
    out = out.reshape(n, c_out, out_h, out_w)
    if return_cols:
        return out, cols
    return out


def conv2d_backward_batch(grad_output, x, kernels, stride=1, padding=0, cols=None):
    """
    Gradients of sum(grad_output * conv(x)) with respect to x, kernels and bias.

    Returns (grad_input, grad_kernels, grad_bias).
    """
    n, c, h, w = x.shape
    _check_bank(kernels, c, h, w, padding, 'conv2d_backward')
    c_out, _, k_h, k_w = kernels.shape
    out_h = output_extent(h, k_h, stride, padding)
    out_w = output_extent(w, k_w, stride, padding)
    expected = (n, c_out, out_h, out_w)
    if grad_output.shape != expected:
        for axis, want, got in zip(('batch', 'channels', 'height', 'width'), expected, grad_output.shape):
            if want != got:
                raise ShapeError(axis, want, got, 'conv2d_backward grad_output')

    if cols is None:
        cols = im2col(_pad(x, padding), k_h, k_w, stride, out_h, out_w)
    d_out = grad_output.reshape(n, c_out, out_h * out_w)

    grad_kernels = np.tensordot(d_out, cols, axes=([0, 2], [0, 2])).reshape(kernels.shape)
    grad_bias = d_out.sum(axis=(0, 2))
    d_cols = np.matmul(kernels.reshape(c_out, -1).T, d_out)
    padded_shape = (n, c, h + 2 * padding, w + 2 * padding)
    grad_padded = col2im(d_cols, padded_shape, k_h, k_w, stride, out_h, out_w)
    if padding:
        grad_input = grad_padded[:, :, padding:padding + h, padding:padding + w]
    else:
        grad_input = grad_padded
    return np.ascontiguousarray(grad_input), grad_kernels, grad_bias


def conv2d_forward(tensor, kernels, stride=1, padding=0):
    """Single-tensor convolution: Tensor3 in, Tensor3 out."""
    kernels = np.asarray(kernels)
    dtype = np.result_type(tensor.values, kernels)
    out = conv2d_forward_batch(
        tensor.values[None].astype(dtype, copy=False), kernels.astype(dtype, copy=False),
        stride=stride, padding=padding,
    )
    return Tensor3(out[0])


def conv2d_backward(grad_output, saved_input, kernels, stride=1, padding=0):
    """Single-tensor backward pass: returns (grad_input Tensor3, grad_kernels array)."""
    kernels = np.asarray(kernels)
    dtype = np.result_type(grad_output.values, saved_input.values, kernels)
    grad_input, grad_kernels, _ = conv2d_backward_batch(
        grad_output.values[None].astype(dtype, copy=False),
        saved_input.values[None].astype(dtype, copy=False),
        kernels.astype(dtype, copy=False),
        stride=stride, padding=padding,
    )
    return Tensor3(grad_input[0]), grad_kernels
