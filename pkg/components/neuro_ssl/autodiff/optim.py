import logging
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

logger = logging.getLogger(__name__)


@dataclass
class AdamWState:
    lr: float
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    first_moments: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moments: Dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params, grads, state):
    """One decoupled weight-decay Adam update over named parameters.

    `params` and `grads` map names to arrays; the returned dict holds the new
    values and `state` is advanced in place. Names missing from `grads` are left
    as they are.
    """
    state.step += 1
    beta1, beta2 = state.betas
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    updated = {}
    for name, value in params.items():
        grad = grads.get(name)
        if grad is None:
            updated[name] = value
            continue
        if grad.shape != value.shape:
            raise ValueError('gradient for {} has shape {}, parameter has {}'.format(name, grad.shape, value.shape))
        m = state.first_moments.get(name)
        v = state.second_moments.get(name)
        if m is None:
            m = np.zeros_like(value)
            v = np.zeros_like(value)
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        state.first_moments[name] = m
        state.second_moments[name] = v

        new_value = value - state.lr * state.weight_decay * value
        m_hat = m / correction1
        v_hat = v / correction2
        new_value = new_value - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        updated[name] = new_value.astype(value.dtype, copy=False)
    return updated


class AdamW:
    """Optimiser over a fixed list of named Parameters; frozen ones are skipped every step."""

    def __init__(self, named_parameters, lr, weight_decay=0.01, betas=(0.9, 0.999), eps=1e-8):
        self.named_parameters = list(named_parameters)
        self.state = AdamWState(lr=lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay)

    def add_parameters(self, named_parameters):
        known = {name for name, _ in self.named_parameters}
        self.named_parameters.extend((name, p) for name, p in named_parameters if name not in known)

    def step(self):
        active = [(name, p) for name, p in self.named_parameters if not p.frozen and p.grad is not None]
        updated = adamw_step({name: p.values for name, p in active}, {name: p.grad for name, p in active},
                             self.state)
        for name, p in active:
            p.values = updated[name]
        return len(active)

    def zero_grad(self):
        for _, p in self.named_parameters:
            p.zero_grad()
