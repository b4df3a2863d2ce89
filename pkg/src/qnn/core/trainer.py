"""Mini-batch training loop shared by plain, sparse and distilled training."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import NumericError
from . import functional as F
from .optim import SGD
from .tensor import backward, no_grad

DIVERGENCE_FACTOR = 10.0


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-5
    schedule: str = "cosine"  # "cosine" | "constant" | "step"
    seed: int = 0
    freeze_non_bn: bool = False

    def to_dict(self):
        return asdict(self)


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    if cfg.schedule == "constant" or cfg.epochs <= 1:
        return cfg.lr
    if cfg.schedule == "step":
        return cfg.lr * (0.1 ** (epoch // max(1, cfg.epochs // 3)))
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * epoch / cfg.epochs))


def l1_gamma_penalty(net):
    """Sum of |gamma| over every BN layer, as a graph node."""
    total = None
    for _, bn in net.bn_layers():
        term = F.sum(F.abs(bn.gamma))
        total = term if total is None else F.add(total, term)
    return total


def train(net, x, y, cfg: TrainConfig, sparsity: float = 0.0, teacher=None, augment=None, log=None):
    """Train ``net`` in place; returns the list of per-epoch mean losses.

    ``sparsity`` adds ``sparsity * sum|gamma|`` over all BN layers.  ``teacher``
    (a :class:`qnn.distill.Teacher`) switches the task loss to the
    distillation loss.  ``augment(xb, rng)`` is applied to training batches only.
    """
    rng = np.random.default_rng(cfg.seed)
    aug_rng = np.random.default_rng([cfg.seed, 1])
    if cfg.freeze_non_bn:
        params = [t for _, bn in net.bn_layers() for t in (bn.gamma, bn.beta)]
    else:
        params = net.parameters()
    opt = SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    n = len(x)
    history = []
    for epoch in range(cfg.epochs):
        opt.lr = lr_at(cfg, epoch)
        order = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            xb, yb = x[idx], y[idx]
            if augment is not None:
                xb = augment(xb, aug_rng)
            net.zero_grad()
            logits = net.forward(xb, training=True)
            if teacher is not None:
                from ..distill import kd_loss
                loss = kd_loss(logits, teacher.logits(xb, idx), yb, teacher.tau, teacher.mu)
            else:
                loss = F.cross_entropy(logits, yb)
            if sparsity:
                loss = F.add(loss, F.mul(l1_gamma_penalty(net), sparsity))
            backward(loss)
            opt.step()
            total += float(loss.data) * len(idx)
            count += len(idx)
        mean_loss = total / max(count, 1)
        if not math.isfinite(mean_loss):
            raise NumericError(f"training loss became non-finite at epoch {epoch}")
        if history and mean_loss > DIVERGENCE_FACTOR * history[0]:
            raise NumericError(f"training diverged at epoch {epoch}: loss {mean_loss:.4g} > "
                               f"{DIVERGENCE_FACTOR:g} x initial {history[0]:.4g}")
        history.append(mean_loss)
        if log is not None:
            log(f"epoch {epoch} loss {mean_loss:.4f}")
    return history


def accuracy(net, x, y, batch_size: int = 256) -> float:
    """Top-1 accuracy in percent, BN in eval mode."""
    if len(x) == 0:
        return 0.0
    with no_grad():
        logits = net.predict(x, batch_size)
    return 100.0 * float(np.mean(logits.argmax(axis=1) == y))
