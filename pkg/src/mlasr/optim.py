"""Plain stochastic gradient descent with global-norm clipping.

Deliberately minimal: constant learning rate, batch size one, a single
seeded generator driving every epoch's shuffle so runs are bit
reproducible.
"""

import numpy as np


def global_grad_norm(params):
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))


def clip_gradients(params, max_norm):
    """Scale all gradients down to max_norm if they exceed it; returns
    the pre-clip norm."""
    norm = global_grad_norm(params)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= factor
    return norm


def sgd_step(params, lr):
    for p in params:
        if p.grad is not None:
            p.value -= lr * p.grad


def epoch_orders(n_items, epochs, seed):
    """One permutation per epoch from a single seeded generator."""
    rng = np.random.default_rng(seed)
    return [rng.permutation(n_items) for _ in range(epochs)]
