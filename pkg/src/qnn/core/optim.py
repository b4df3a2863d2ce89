"""Plain SGD with momentum and L2 weight decay."""

from __future__ import annotations

import numpy as np

from ..errors import NumericError, ShapeError


def sgd_step(params, grads, lr, weight_decay=0.0, momentum=0.0, buffers=None):
    """One SGD update on numpy arrays; returns ``(new_params, new_buffers)``.

    ``v = g + weight_decay * p + momentum * v_prev`` and ``p <- p - lr * v``
    (``v_prev`` starts at zero).  Nothing is updated if any gradient is
    non-finite.
    """
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params but {len(grads)} grads")
    for i, (p, g) in enumerate(zip(params, grads)):
        if np.shape(p) != np.shape(g):
            raise ShapeError(f"param {i}: shape {np.shape(p)} vs grad {np.shape(g)}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {i}; step aborted")
    if buffers is None:
        buffers = [None] * len(params)
    new_p, new_b = [], []
    for p, g, buf in zip(params, grads, buffers):
        v = g + weight_decay * p if weight_decay else np.asarray(g)
        if momentum:
            v = v + momentum * buf if buf is not None else v
        new_p.append(p - lr * v)
        new_b.append(v if momentum else None)
    return new_p, new_b


class SGD:
    def __init__(self, params, lr=0.1, momentum=0.9, weight_decay=5e-5):
        self.params = list(params)
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.buffers = [None] * len(self.params)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        live = [i for i, p in enumerate(self.params) if p.grad is not None]
        new_p, new_b = sgd_step([self.params[i].data for i in live], [self.params[i].grad for i in live],
                                self.lr, self.weight_decay, self.momentum, [self.buffers[i] for i in live])
        for i, p, b in zip(live, new_p, new_b):
            self.params[i].data[...] = p
            self.buffers[i] = b
