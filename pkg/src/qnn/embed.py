"""Binary feature embedding by alternating optimisation.

Given features ``Y`` (samples x n) we look for a projection ``P`` (m x n),
sign codes ``B`` (samples x m) and a column mask ``M`` (length m) minimising

    0.5 * ||Y P^T - M o B||^2 + gamma/2 * ||P^T P - I||^2 + beta * ||M||_1

where ``M o B`` scales column ``j`` of ``B`` by ``M[j]``.  ``M`` is relaxed to
[0, 1] while optimising and read out with a 0.5 threshold; the number of
surviving columns is the estimated binary width.

Two conveniences make ``gamma`` and ``beta`` dataset-independent in
:func:`alternate` (both on by default): the reconstruction term is averaged
over the ``samples * m`` code entries (``normalize``), and the features are
rescaled so that the mean squared row norm is ``m`` (``rescale``).  With the
latter an orthonormal ``P`` maps a typical sample onto entries of unit
magnitude, which is what ``+-1`` codes can match.  The loss functions take the
averaging factor as ``scale``; the distance check is scale invariant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import pdist

from .errors import NumericError, ShapeError
from .quant import sign

DIVERGENCE_FACTOR = 10.0
MASK_THRESHOLD = 0.5


@dataclass
class SolverConfig:
    lr_p: float = 0.05
    lr_m: float = 5.0  # the averaged reconstruction gradient in M is small
    epochs_p: int = 5
    epochs_m: int = 5
    batch_size: int = 50
    seed: int = 0


@dataclass
class EmbedState:
    Y: np.ndarray
    P: np.ndarray
    B: np.ndarray
    M: np.ndarray
    gamma: float
    beta: float
    normalize: bool = True
    feature_scale: float = 1.0
    trace: list = field(default_factory=list)

    @property
    def m(self) -> int:
        return self.P.shape[0]

    @property
    def n(self) -> int:
        return self.P.shape[1]

    @property
    def mask(self) -> np.ndarray:
        return (self.M >= MASK_THRESHOLD).astype(np.int64)

    @property
    def kept(self) -> int:
        return int(self.mask.sum())

    def objective(self) -> float:
        return objective(self.Y, self.P, self.B, self.M, self.gamma, self.beta, _scale(self))

    def to_arrays(self) -> dict:
        return {"P": self.P, "B": self.B, "M": self.M, "mask": self.mask,
                "gamma": np.array(self.gamma), "beta": np.array(self.beta)}


def _scale(state) -> float:
    return 1.0 / (state.Y.shape[0] * state.m) if state.normalize else 1.0


def _check(Y, P):
    if Y.ndim != 2 or P.ndim != 2 or Y.shape[1] != P.shape[1]:
        raise ShapeError(f"features {Y.shape} and projection {P.shape} do not compose")


def solve_B(Y, P) -> np.ndarray:
    """Sign codes of ``Y P^T`` (0 maps to +1)."""
    Y, P = np.asarray(Y, dtype=np.float64), np.asarray(P, dtype=np.float64)
    _check(Y, P)
    return sign(Y @ P.T)


def reconstruction(Y, P, B, M) -> float:
    R = Y @ P.T - B * M
    return 0.5 * float(np.sum(R * R))


def objective(Y, P, B, M, gamma, beta, scale: float = 1.0) -> float:
    n = P.shape[1]
    G = P.T @ P - np.eye(n)
    return (scale * reconstruction(Y, P, B, M) + 0.5 * gamma * float(np.sum(G * G))
            + beta * float(np.sum(np.abs(M))))


def mask_loss_grad(Y, P, B, M, beta, scale: float = 1.0):
    """Loss ``scale * 0.5||YP^T - M o B||^2 + beta ||M||_1`` and its gradient in M."""
    Y, P, B, M = (np.asarray(a, dtype=np.float64) for a in (Y, P, B, M))
    R = Y @ P.T - B * M
    loss = scale * 0.5 * float(np.sum(R * R)) + beta * float(np.sum(np.abs(M)))
    # subgradient of |M| taken as 0 at 0
    grad = -scale * np.sum(R * B, axis=0) + beta * np.sign(M)
    return loss, grad


def projection_loss_grad(Y, B, M, P, gamma, scale: float = 1.0):
    """Loss ``scale * 0.5||YP^T - M o B||^2 + gamma/2 ||P^T P - I||^2`` and its gradient in P."""
    Y, B, M, P = (np.asarray(a, dtype=np.float64) for a in (Y, B, M, P))
    _check(Y, P)
    R = Y @ P.T - B * M
    G = P.T @ P - np.eye(P.shape[1])
    loss = scale * 0.5 * float(np.sum(R * R)) + 0.5 * gamma * float(np.sum(G * G))
    grad = scale * (R.T @ Y) + 2.0 * gamma * (P @ G)
    return loss, grad


def random_orthonormal(m: int, n: int, rng) -> np.ndarray:
    """m x n matrix with orthonormal columns (m >= n) or rows (m < n)."""
    if m >= n:
        q, r = np.linalg.qr(rng.standard_normal((m, n)))
        return q * np.sign(np.diag(r))
    q, r = np.linalg.qr(rng.standard_normal((n, m)))
    return (q * np.sign(np.diag(r))).T


def _minibatches(n, batch, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch):
        yield order[start:start + batch]


def alternate(Y, m: int | None = None, gamma: float = 1.0, beta: float = 1e-2, rounds: int = 10,
              config: SolverConfig | None = None, P0=None, normalize: bool = True,
              rescale: bool = True):
    """Alternate B / M / P updates; returns the final :class:`EmbedState`.

    ``m`` defaults to ``8 * n``.  Each round records the full-data objective
    before and after the B-step and at the end of the round in
    ``state.trace``.
    """
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim != 2:
        raise ShapeError(f"features must be 2-D, got {Y.shape}")
    cfg = config or SolverConfig()
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    N, n = Y.shape
    m = 8 * n if m is None else int(m)
    if m < 1:
        raise ValueError("m must be >= 1")
    feature_scale = 1.0
    if rescale:
        power = float(np.mean(np.sum(Y * Y, axis=1)))
        if power > 0:
            feature_scale = float(np.sqrt(m / power))
            Y = Y * feature_scale
    rng = np.random.default_rng(cfg.seed)
    P = random_orthonormal(m, n, rng) if P0 is None else np.array(P0, dtype=np.float64)
    _check(Y, P)
    if P.shape[0] != m:
        raise ShapeError(f"initial projection has {P.shape[0]} rows, expected {m}")
    M = np.ones(m)
    B = solve_B(Y, P)
    state = EmbedState(Y, P, B, M, float(gamma), float(beta), normalize, feature_scale)
    initial = state.objective()

    for rnd in range(rounds):
        before = state.objective()
        state.B = solve_B(Y, state.P)
        after = state.objective()

        for _ in range(cfg.epochs_m):
            for idx in _minibatches(N, cfg.batch_size, rng):
                s = 1.0 / (len(idx) * m) if normalize else 1.0
                _, g = mask_loss_grad(Y[idx], state.P, state.B[idx], state.M, beta, s)
                state.M = np.clip(state.M - cfg.lr_m * g, 0.0, 1.0)

        with np.errstate(over="ignore", invalid="ignore"):
            for _ in range(cfg.epochs_p):
                for idx in _minibatches(N, cfg.batch_size, rng):
                    s = 1.0 / (len(idx) * m) if normalize else 1.0
                    _, g = projection_loss_grad(Y[idx], state.B[idx], state.M, state.P, gamma, s)
                    state.P = state.P - cfg.lr_p * g
                if not np.all(np.isfinite(state.P)):
                    break
            obj = state.objective() if np.all(np.isfinite(state.P)) else float("inf")
        state.trace.append({"round": rnd, "before_b": before, "after_b": after, "objective": obj,
                            "kept": state.kept})
        if not np.isfinite(obj) or obj > DIVERGENCE_FACTOR * max(initial, 1e-12):
            raise NumericError(f"embedding solver diverged in round {rnd}: objective {obj:.4g}, "
                               f"initial {initial:.4g}, |P|_F {np.linalg.norm(state.P):.4g}; "
                               f"try a smaller lr_p (now {cfg.lr_p})")
    return state


def distance_preservation_check(Y, P, eps: float = 1e-12) -> float:
    """Max over sample pairs of the relative change in Euclidean distance under ``P``."""
    Y, P = np.asarray(Y, dtype=np.float64), np.asarray(P, dtype=np.float64)
    _check(Y, P)
    if len(Y) < 2:
        return 0.0
    d = pdist(Y)
    dp = pdist(Y @ P.T)
    return float(np.max(np.abs(dp - d) / (d + eps)))
