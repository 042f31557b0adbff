"""
Hand-written forward and backward passes for the task network.

Everything works on (N, C, H, W) batches in the dtype of the parameters.
"""

import numpy as np

from numcore.conv import conv2d_backward_batch, conv2d_forward_batch
from numcore.errors import ShapeError


def relu(x):
    return np.maximum(x, 0)


def max_pool_forward(x):
    """2x2 / stride 2 max-pool; returns the output and the winning slot per window (first max on ties)."""
    n, c, h, w = x.shape
    windows = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    slots = np.argmax(windows, axis=-1)
    out = np.take_along_axis(windows, slots[..., None], axis=-1)[..., 0]
    return out, slots


def max_pool_backward(grad, slots, input_shape):
    n, c, h, w = input_shape
    windows = np.zeros((n, c, h // 2, w // 2, 4), dtype=grad.dtype)
    np.put_along_axis(windows, slots[..., None], grad[..., None], axis=-1)
    return windows.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)


def check_input(architecture, x):
    expected = architecture.input_shape
    for axis, want, got in zip(('channels', 'height', 'width'), expected, x.shape[1:]):
        if want != got:
            raise ShapeError(axis, want, got, 'task network input')


def forward(params, architecture, x, keep_cache=False):
    """
    Run the network on a batch.

    Returns (outputs (N,) in standardized units, features (N, 512), cache).
    cache holds what backward() needs plus the pooled activations under
    'pooled'; it is None unless keep_cache is set.
    """
    check_input(architecture, x)
    x = x.astype(params['head.weight'].dtype, copy=False)
    blocks = []
    h = x
    for index in range(1, len(architecture.block_channels) + 1):
        bias = params.get(f'conv{index}.bias')
        z, cols = conv2d_forward_batch(h, params[f'conv{index}.weight'], padding=1, bias=bias, return_cols=True)
        a = relu(z)
        pooled, slots = max_pool_forward(a)
        if keep_cache:
            blocks.append({'input': h, 'cols': cols, 'z': z, 'slots': slots})
        h = pooled

    gap = h.mean(axis=(2, 3))
    pre = gap @ params['fc.weight'].T
    if 'fc.bias' in params:
        pre = pre + params['fc.bias']
    features = relu(pre)
    outputs = features @ params['head.weight'][0] + params['head.bias'][0]

    cache = None
    if keep_cache:
        cache = {
            'blocks': blocks,
            'last_shape': h.shape,
            'pooled': gap,
            'pre': pre,
            'features': features,
        }
    return outputs, features, cache


def backward(params, cache, grad_outputs):
    """Gradients of sum(grad_outputs * outputs) for every parameter."""
    grads = {}
    features = cache['features']
    grads['head.weight'] = (grad_outputs @ features)[None, :]
    grads['head.bias'] = np.array([grad_outputs.sum()], dtype=features.dtype)

    d_features = np.outer(grad_outputs, params['head.weight'][0])
    d_pre = d_features * (cache['pre'] > 0)
    grads['fc.weight'] = d_pre.T @ cache['pooled']
    if 'fc.bias' in params:
        grads['fc.bias'] = d_pre.sum(axis=0)
    d_gap = d_pre @ params['fc.weight']

    n, c, h, w = cache['last_shape']
    d_h = np.broadcast_to(d_gap[:, :, None, None] / (h * w), (n, c, h, w))
    for index in range(len(cache['blocks']), 0, -1):
        block = cache['blocks'][index - 1]
        d_a = max_pool_backward(np.ascontiguousarray(d_h), block['slots'], block['z'].shape)
        d_z = d_a * (block['z'] > 0)
        d_h, d_w, d_b = conv2d_backward_batch(
            d_z, block['input'], params[f'conv{index}.weight'], padding=1, cols=block['cols'],
        )
        grads[f'conv{index}.weight'] = d_w
        if f'conv{index}.bias' in params:
            grads[f'conv{index}.bias'] = d_b
    return grads


def mse_loss(outputs, targets):
    """Mean squared error and its gradient with respect to the outputs."""
    residual = outputs - targets
    loss = float(np.mean(residual * residual))
    return loss, (2.0 / len(targets)) * residual
