"""Differentiable operations on Tensors.

Each op computes its forward value with numpy and, when any input needs a
gradient, records a closure returning one gradient per input.
"""
import logging

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..core import IndexOutOfRangeError, ShapeError
from .tensor import Tensor, as_tensor, grad_enabled, unbroadcast

logger = logging.getLogger(__name__)


def _node(values, parents, backward_fn, op):
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(values, requires_grad=True, parents=parents, backward_fn=backward_fn, op=op)
    return Tensor(values, op=op)


# ----------------------------------------------------------
#  Elementwise and shape ops
# ----------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a, _dtype_of(b)), as_tensor(b, _dtype_of(a))

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)
    return _node(a.values + b.values, (a, b), backward, 'add')


def sub(a, b):
    a, b = as_tensor(a, _dtype_of(b)), as_tensor(b, _dtype_of(a))

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)
    return _node(a.values - b.values, (a, b), backward, 'sub')


def mul(a, b):
    a, b = as_tensor(a, _dtype_of(b)), as_tensor(b, _dtype_of(a))

    def backward(g):
        return unbroadcast(g * b.values, a.shape), unbroadcast(g * a.values, b.shape)
    return _node(a.values * b.values, (a, b), backward, 'mul')


def neg(a):
    return _node(-a.values, (a,), lambda g: (-g,), 'neg')


def _dtype_of(value):
    return value.dtype if isinstance(value, Tensor) else None


def reshape(x, shape):
    original = x.shape
    return _node(x.values.reshape(shape), (x,), lambda g: (g.reshape(original),), 'reshape')


def transpose(x, axes):
    inverse = np.argsort(axes)
    return _node(np.transpose(x.values, axes), (x,), lambda g: (np.transpose(g, inverse),), 'transpose')


def broadcast_to(x, shape):
    original = x.shape
    return _node(np.broadcast_to(x.values, shape).copy(), (x,), lambda g: (unbroadcast(g, original),), 'broadcast')


def tensor_sum(x, axis=None, keepdims=False):
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return _node(x.values.sum(axis=axis, keepdims=keepdims), (x,), backward, 'sum')


def mean(x, axis=None, keepdims=False):
    count = x.values.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)
    return _node(x.values.mean(axis=axis, keepdims=keepdims), (x,), backward, 'mean')


def concatenate(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))
    return _node(np.concatenate([t.values for t in tensors], axis=axis), tuple(tensors), backward, 'concat')


def elu(x):
    """x for x > 0, exp(x) - 1 otherwise."""
    negative = np.minimum(x.values, 0)
    out = np.where(x.values > 0, x.values, np.expm1(negative))

    def backward(g):
        return (g * np.where(x.values > 0, 1.0, np.exp(negative)).astype(x.dtype, copy=False),)
    return _node(out, (x,), backward, 'elu')


# ----------------------------------------------------------
#  Layers
# ----------------------------------------------------------

def linear(x, weight, bias=None):
    """Affine map along the trailing axis: x @ W.T + b, W shaped (d_out, d_in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError('linear expects trailing dim {}, got input {}'.format(weight.shape[1], x.shape))
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError('bias must be ({},), got {}'.format(weight.shape[0], bias.shape))
    out = x.values @ weight.values.T
    if bias is not None:
        out = out + bias.values
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        flat_g = g.reshape(-1, g.shape[-1])
        flat_x = x.values.reshape(-1, x.shape[-1])
        grads = [g @ weight.values, flat_g.T @ flat_x]
        if bias is not None:
            grads.append(flat_g.sum(axis=0))
        return tuple(grads)
    return _node(out, parents, backward, 'linear')


def conv1d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of (C_in x L) or (B x C_in x L) input with (C_out x C_in x k) weights.

    Output length is floor((L + 2*padding - k) / stride) + 1; padding is zeros.
    """
    batched = x.ndim == 3
    if x.ndim not in (2, 3) or weight.ndim != 3:
        raise ShapeError('conv1d expects (B x) C_in x L input and 3-d weights, got {} and {}'.format(
            x.shape, weight.shape))
    c_out, c_in, k = weight.shape
    if x.shape[-2] != c_in:
        raise ShapeError('conv1d expects {} input channels, got {}'.format(c_in, x.shape[-2]))
    length = x.shape[-1]
    if length + 2 * padding < k or stride < 1:
        raise ShapeError('conv1d input of length {} with padding {} is shorter than kernel {}'.format(
            length, padding, k))
    values = x.values if batched else x.values[None]
    padded = np.pad(values, ((0, 0), (0, 0), (padding, padding))) if padding else values
    windows = sliding_window_view(padded, k, axis=-1)[:, :, ::stride, :]
    out_len = windows.shape[2]
    out = np.einsum('bclk,ock->bol', windows, weight.values, optimize=True)
    if bias is not None:
        out = out + bias.values[:, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g = g if batched else g[None]
        grad_w = np.einsum('bclk,bol->ock', windows, g, optimize=True)
        grad_windows = np.einsum('bol,ock->bclk', g, weight.values, optimize=True)
        grad_padded = np.zeros_like(padded)
        span = stride * (out_len - 1) + 1
        for tap in range(k):
            grad_padded[:, :, tap:tap + span:stride] += grad_windows[:, :, :, tap]
        grad_x = grad_padded[:, :, padding:padding + length]
        grads = [grad_x if batched else grad_x[0], grad_w]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)))
        return tuple(grads)
    return _node(out if batched else out[0], parents, backward, 'conv1d')


def film(h, gamma, beta):
    """gamma * h + beta with per-channel (or per-item, per-channel) gamma and beta broadcast over time."""
    if gamma.shape != beta.shape or gamma.shape[-1] != h.shape[-2]:
        raise ShapeError('film needs gamma and beta over {} channels, got {} and {}'.format(
            h.shape[-2], gamma.shape, beta.shape))
    gamma = reshape(gamma, gamma.shape + (1,))
    beta = reshape(beta, beta.shape + (1,))
    return add(mul(h, gamma), beta)


def embedding_lookup(table, index):
    """Rows of `table` at `index`; the gradient is scattered back onto those rows only."""
    index = np.asarray(index, dtype=np.int64)
    rows = table.shape[0]
    if np.any(index < 0) or np.any(index >= rows):
        raise IndexOutOfRangeError('embedding index {} outside [0, {})'.format(index.tolist(), rows))

    def backward(g):
        grad = np.zeros_like(table.values)
        np.add.at(grad, index, g)
        return (grad,)
    return _node(table.values[index], (table,), backward, 'embedding')


def cross_entropy(logits, labels):
    """Batch-mean of -log softmax(logits)[label]; leading axes are flattened into the batch."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    classes = logits.shape[-1]
    flat = logits.values.reshape(-1, classes)
    if flat.shape[0] != labels.shape[0]:
        raise ShapeError('{} labels for {} rows of logits'.format(labels.shape[0], flat.shape[0]))
    if flat.shape[0] == 0:
        raise ShapeError('cross_entropy of an empty batch')
    if np.any(labels < 0) or np.any(labels >= classes):
        raise IndexOutOfRangeError('labels must lie in [0, {}), got {}'.format(
            classes, sorted(set(labels.tolist()))))
    shifted = flat - flat.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(labels.shape[0])
    loss = np.mean(log_norm - shifted[rows, labels])

    def backward(g):
        probs = np.exp(shifted - log_norm[:, None])
        probs[rows, labels] -= 1.0
        return ((g * probs / labels.shape[0]).reshape(logits.shape).astype(logits.dtype, copy=False),)
    return _node(np.asarray(loss, dtype=logits.dtype), (logits,), backward, 'cross_entropy')


def softmax(values, axis=-1):
    shifted = values - values.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=axis, keepdims=True)


Tensor.__add__ = add
Tensor.__radd__ = lambda self, other: add(other, self)
Tensor.__sub__ = sub
Tensor.__rsub__ = lambda self, other: sub(other, self)
Tensor.__mul__ = mul
Tensor.__rmul__ = lambda self, other: mul(other, self)
Tensor.__neg__ = neg
