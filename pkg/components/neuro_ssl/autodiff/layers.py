import logging

import numpy as np

from . import functional as F
from .tensor import Parameter

logger = logging.getLogger(__name__)


def kaiming_uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Holds Parameters and sub-Modules as attributes; dicts of Modules are walked by key."""

    def named_parameters(self, prefix=''):
        for name, value in sorted(vars(self).items()):
            path = prefix + name
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + '.')
            elif isinstance(value, dict):
                for key in sorted(value):
                    if isinstance(value[key], Module):
                        yield from value[key].named_parameters('{}.{}.'.format(path, key))

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def freeze(self):
        for p in self.parameters():
            p.frozen = True
        return self

    def unfreeze(self):
        for p in self.parameters():
            p.frozen = False
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def n_parameters(self):
        return int(sum(p.values.size for p in self.parameters()))


class Linear(Module):
    def __init__(self, rng, d_in, d_out, dtype=np.float32, bias=True):
        self.weight = Parameter(kaiming_uniform(rng, (d_out, d_in), d_in, dtype), 'weight')
        self.bias = Parameter(np.zeros(d_out, dtype=dtype), 'bias') if bias else None

    @property
    def d_in(self):
        return self.weight.shape[1]

    @property
    def d_out(self):
        return self.weight.shape[0]

    def __call__(self, x):
        return F.linear(x, self.weight, self.bias)


class Conv1d(Module):
    def __init__(self, rng, c_in, c_out, kernel, stride=1, padding=0, dtype=np.float32):
        self.weight = Parameter(kaiming_uniform(rng, (c_out, c_in, kernel), c_in * kernel, dtype), 'weight')
        self.bias = Parameter(np.zeros(c_out, dtype=dtype), 'bias')
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return F.conv1d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Embedding(Module):
    def __init__(self, rng, rows, dim, dtype=np.float32):
        self.table = Parameter((rng.normal(size=(rows, dim)) / np.sqrt(dim)).astype(dtype), 'table')

    def __call__(self, index):
        return F.embedding_lookup(self.table, index)


class Mlp(Module):
    """Two linear layers with an ELU between them."""

    def __init__(self, rng, d_in, d_hidden, d_out, dtype=np.float32):
        self.hidden = Linear(rng.fork('hidden'), d_in, d_hidden, dtype)
        self.output = Linear(rng.fork('output'), d_hidden, d_out, dtype)

    def __call__(self, x):
        return self.output(F.elu(self.hidden(x)))
