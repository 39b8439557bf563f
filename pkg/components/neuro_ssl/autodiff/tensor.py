import logging
from contextlib import contextmanager

import numpy as np

logger = logging.getLogger(__name__)


def unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """An n-d array node on the reverse-mode tape.

    A node only records parents and a backward closure when one of its inputs
    requires a gradient, so frozen sub-graphs cost no tape.
    """

    def __init__(self, values, requires_grad=False, parents=(), backward_fn=None, op=''):
        self.values = values if isinstance(values, np.ndarray) else np.asarray(values, dtype=np.float64)
        self.grad = None
        self._requires_grad = requires_grad
        self._parents = tuple(parents)
        self._backward_fn = backward_fn
        self._op = op

    @property
    def requires_grad(self):
        return self._requires_grad

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def dtype(self):
        return self.values.dtype

    def accumulate(self, grad):
        if not self.requires_grad:
            return
        if grad.shape != self.values.shape:
            grad = unbroadcast(grad, self.values.shape)
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.values.dtype, copy=True)
        else:
            self.grad = self.grad + grad

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Propagate from this node; every node is visited once, in reverse topological order.

        The tape below this node is released afterwards.
        """
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        if grad is None:
            grad = np.ones_like(self.values)
        grads = {id(self): np.asarray(grad, dtype=self.values.dtype)}
        for node in reversed(order):
            node_grad = grads.pop(id(node), None)
            if node_grad is None:
                continue
            if node._backward_fn is None:
                node.accumulate(node_grad)
                continue
            for parent, parent_grad in zip(node._parents, node._backward_fn(node_grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + parent_grad
                else:
                    grads[key] = parent_grad
            node._parents = ()
            node._backward_fn = None

    def detach(self):
        return Tensor(self.values)

    def numpy(self):
        return self.values

    def item(self):
        return float(self.values)

    # operators are bound in functional.py
    def __repr__(self):
        return 'Tensor(shape={}, dtype={}, requires_grad={}{})'.format(
            self.shape, self.dtype, self.requires_grad, ', op={}'.format(self._op) if self._op else '')


class Parameter(Tensor):
    """A named trainable leaf; frozen parameters collect no gradient and get no updates."""

    def __init__(self, values, name='', frozen=False):
        super().__init__(np.asarray(values), requires_grad=True)
        self.name = name
        self.frozen = frozen

    @property
    def requires_grad(self):
        return not self.frozen

    def __repr__(self):
        return 'Parameter({}, shape={}{})'.format(self.name, self.shape, ', frozen' if self.frozen else '')


def as_tensor(value, dtype=None):
    if isinstance(value, Tensor):
        return value
    array = np.asarray(value)
    if dtype is not None:
        array = array.astype(dtype, copy=False)
    elif array.dtype.kind != 'f':
        array = array.astype(np.float64)
    return Tensor(array)


_grad_state = {'enabled': True}


def grad_enabled():
    return _grad_state['enabled']


@contextmanager
def no_grad():
    """Forward passes inside record no tape."""
    previous = _grad_state['enabled']
    _grad_state['enabled'] = False
    try:
        yield
    finally:
        _grad_state['enabled'] = previous
