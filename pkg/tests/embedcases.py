"""Feature matrices and solver settings shared by the embedding tests."""

import numpy as np

from qnn.embed import SolverConfig


def toy_features(seed, samples=200, n=16):
    """Outputs of a random two-layer ReLU network on Gaussian inputs."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((samples, 8))
    w1 = rng.standard_normal((8, 32)) / np.sqrt(8)
    w2 = rng.standard_normal((32, n)) / np.sqrt(32)
    return np.maximum(x @ w1, 0) @ w2


TOY = SolverConfig(lr_p=0.05, lr_m=5.0)
