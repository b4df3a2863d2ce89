"""Knowledge distillation: temperature-softened teacher targets plus CE.

The loss is ``CE(y, softmax(o_S)) + mu * H(softmax(o_T / tau), softmax(o_S / tau))``
with no ``tau**2`` rescaling of the soft term.  Teacher logits never receive
gradient.

Cached teacher logits are stored with :func:`qnn.core.container.write_matrix`:
a little-endian ``u64 rows, u64 cols`` header followed by ``rows * cols``
float64 values in row-major order (one row per training sample).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import functional as F
from .core.container import read_matrix, write_matrix
from .core.tensor import Tensor, as_tensor, no_grad
from .errors import ConfigError, ShapeError


@dataclass
class DistillConfig:
    tau: float = 10.0
    mu: float = 0.2
    teacher: str = ""  # model file; empty means "no distillation"

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"distillation temperature must be > 0, got {self.tau}")
        if self.mu < 0:
            raise ConfigError(f"distillation weight must be >= 0, got {self.mu}")


def soften(logits, tau: float = 1.0) -> np.ndarray:
    """softmax(logits / tau) along the last axis."""
    if not tau > 0:
        raise ValueError("tau must be > 0")
    z = np.asarray(logits, dtype=np.float64) / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _labels(y, n_classes):
    y = np.asarray(y)
    if y.ndim == 2:
        if y.shape[1] != n_classes:
            raise ShapeError(f"one-hot labels have {y.shape[1]} classes, logits {n_classes}")
        return y.argmax(axis=1)
    return y.astype(np.int64)


def kd_loss(student, teacher_logits, y, tau: float, mu: float) -> Tensor:
    """Batch-mean distillation loss; differentiable in ``student`` only.

    ``y`` may be integer labels or one-hot rows.
    """
    student = as_tensor(student)
    t = np.asarray(teacher_logits.data if isinstance(teacher_logits, Tensor) else teacher_logits,
                   dtype=student.dtype)
    if t.shape != student.shape:
        raise ShapeError(f"teacher logits {t.shape} vs student {student.shape}")
    labels = _labels(y, student.shape[1])
    loss = F.cross_entropy(student, labels)
    if mu:
        loss = F.add(loss, F.mul(F.soft_cross_entropy(student, soften(t, tau), tau), mu))
    return loss


class Teacher:
    """Supplies teacher logits for a training batch.

    Backed either by a network (run in eval mode on the batch) or by a
    logits table indexed by training-sample position.
    """

    def __init__(self, tau: float, mu: float, network=None, cached=None):
        if network is None and cached is None:
            raise ConfigError("teacher needs a network or cached logits")
        DistillConfig(tau=tau, mu=mu)
        self.tau, self.mu = float(tau), float(mu)
        self.network = network
        self.cached = None if cached is None else np.asarray(cached, dtype=np.float64)

    def logits(self, xb, idx) -> np.ndarray:
        if self.cached is not None:
            return self.cached[idx]
        with no_grad():
            return self.network.forward(xb, training=False).data


def cache_teacher_logits(network, x, path=None, batch_size: int = 256) -> np.ndarray:
    logits = network.predict(x, batch_size)
    if path is not None:
        write_matrix(path, logits)
    return logits


def load_teacher_logits(path) -> np.ndarray:
    return read_matrix(path)
