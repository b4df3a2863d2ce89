"""Weight and activation quantizers with straight-through gradients.

Conventions used everywhere in the package:

* ``sign(0) = +1``.
* ``round`` is round-half-away-from-zero.
* 1-bit weights are ``alpha * sign(W)`` with ``alpha = mean(|W|)`` per output
  filter (or per tensor).
* n-bit weights (n >= 2) follow the tanh / normalise / round / rescale
  recipe and land on ``{-1, -1 + 2/s, ..., 1}`` with ``s = 2**n - 1``.
* n-bit activations are clamped to [0, 1] and rounded to ``{0, 1/s, ..., 1}``.
* 32 bits means pass-through.

Quantizers run on a shadow copy: master weights stay in full precision and
the quantized values are recomputed on every forward pass.

Inside :func:`surrogate_mode` every rounding step (``round`` and ``sign``) is
replaced by the identity in the forward pass.  The backward rules are the
same in both modes, so in surrogate mode they are the exact derivative of the
forward computation; that is what the finite-difference checks rely on.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from .core.tensor import Tensor, as_tensor

FULL_PRECISION = 32

_surrogate = False


@contextlib.contextmanager
def surrogate_mode():
    global _surrogate
    prev = _surrogate
    _surrogate = True
    try:
        yield
    finally:
        _surrogate = prev


@dataclass(frozen=True)
class QuantConfig:
    weight_bits: int = FULL_PRECISION
    act_bits: int = FULL_PRECISION

    def __post_init__(self):
        for name in ("weight_bits", "act_bits"):
            bits = getattr(self, name)
            if not 1 <= int(bits) <= FULL_PRECISION:
                raise ValueError(f"{name} must be in 1..32, got {bits}")


def grid_scale(bits: int) -> int:
    return (1 << int(bits)) - 1


def round_half_away(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    whole = np.trunc(x)
    frac = x - whole
    return whole + np.where(np.abs(frac) >= 0.5, np.sign(x), 0.0)


def sign(x: np.ndarray) -> np.ndarray:
    """Elementwise sign with sign(0) = +1."""
    x = np.asarray(x)
    return np.where(x >= 0, 1.0, -1.0).astype(x.dtype if x.dtype.kind == "f" else np.float64)


def _filter_axes(w: np.ndarray, per_filter: bool):
    if per_filter and w.ndim >= 2:
        return tuple(range(1, w.ndim))
    return None


# -- plain numpy quantizers ----------------------------------------------

def binarize_weights(w, per_filter: bool = True):
    """Return ``(alpha, B)`` with ``B = sign(W)`` and ``alpha = mean|W|``.

    With ``per_filter`` alpha has shape ``(n_filters, 1, ..., 1)`` so that
    ``alpha * B`` broadcasts; otherwise it is a 0-d array.
    """
    w = np.asarray(w, dtype=np.float64) if np.asarray(w).dtype.kind != "f" else np.asarray(w)
    if w.size == 0:
        raise ValueError("binarize_weights: empty tensor")
    axes = _filter_axes(w, per_filter)
    alpha = np.mean(np.abs(w), axis=axes, keepdims=axes is not None)
    return alpha, sign(w)


def quantize_weights_nbit(w, bits: int, per_filter_max: bool = False) -> np.ndarray:
    """n-bit weight quantizer (n >= 2).  All-zero input maps to all zeros."""
    if bits < 2:
        raise ValueError("quantize_weights_nbit needs bits >= 2; use binarize_weights for 1 bit")
    w = np.asarray(w, dtype=np.float64) if np.asarray(w).dtype.kind != "f" else np.asarray(w)
    t = np.tanh(w)
    axes = _filter_axes(w, per_filter_max)
    mx = np.max(np.abs(t), axis=axes, keepdims=axes is not None)
    scale = grid_scale(bits)
    safe = np.where(mx > 0, mx, 1.0)
    w01 = t / (2.0 * safe) + 0.5
    q = 2.0 * (round_half_away(w01 * scale) / scale) - 1.0
    return np.where(mx > 0, q, 0.0).astype(w.dtype)


def quantize_activations_nbit(a, bits: int) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64) if np.asarray(a).dtype.kind != "f" else np.asarray(a)
    scale = grid_scale(bits)
    return round_half_away(np.clip(a, 0.0, 1.0) * scale) / scale


def ste_backward(upstream, inputs, pass_region=None) -> np.ndarray:
    """Straight-through gradient: pass ``upstream`` where ``inputs`` lies in
    ``pass_region`` (a closed interval ``(lo, hi)``; ``None`` passes everywhere)."""
    upstream = np.asarray(upstream)
    if pass_region is None:
        return upstream.copy()
    lo, hi = pass_region
    x = np.asarray(inputs)
    return np.where((x >= lo) & (x <= hi), upstream, 0.0).astype(upstream.dtype)


# -- differentiable versions ---------------------------------------------

def binary_weight(w, per_filter: bool = True) -> Tensor:
    """``alpha(W) * sign(W)`` with STE through sign and the exact alpha term."""
    w = as_tensor(w)
    axes = _filter_axes(w.data, per_filter)
    count = w.size // w.shape[0] if axes is not None else w.size
    alpha = np.mean(np.abs(w.data), axis=axes, keepdims=axes is not None)
    s = w.data.copy() if _surrogate else sign(w.data)

    def back(g):
        d_alpha = np.sum(g * s, axis=axes, keepdims=axes is not None)
        return (ste_backward(g * alpha, w.data) + d_alpha * np.sign(w.data) / count,)

    return Tensor.from_op(alpha * s, (w,), back, "binary_weight")


def nbit_weight(w, bits: int, per_filter_max: bool = False) -> Tensor:
    w = as_tensor(w)
    t = np.tanh(w.data)
    axes = _filter_axes(w.data, per_filter_max)
    keep = axes is not None
    absT = np.abs(t)
    mx = np.max(absT, axis=axes, keepdims=keep)
    if np.any(mx == 0):
        # degenerate (all-zero) weights: output 0, gradient straight through
        z = np.zeros_like(w.data)
        return Tensor.from_op(z, (w,), lambda g: (g.copy(),), "nbit_weight")
    scale = grid_scale(bits)
    w01 = t / (2.0 * mx) + 0.5
    w2 = w01 if _surrogate else round_half_away(w01 * scale) / scale
    out = 2.0 * w2 - 1.0

    def back(g):
        d01 = ste_backward(2.0 * g, w01)
        dt = d01 / (2.0 * mx)
        d_mx = np.sum(d01 * (-t / (2.0 * mx * mx)), axis=axes, keepdims=keep)
        # max|t| routes its gradient to the (first) arg-max element
        if keep:
            flat = absT.reshape(absT.shape[0], -1)
            arg = flat.argmax(axis=1)
            onehot = np.zeros_like(flat)
            onehot[np.arange(flat.shape[0]), arg] = 1.0
            onehot = onehot.reshape(absT.shape)
        else:
            onehot = np.zeros(absT.size)
            onehot[absT.argmax()] = 1.0
            onehot = onehot.reshape(absT.shape)
        dt = dt + d_mx * onehot * np.sign(t)
        return (dt * (1.0 - t * t),)

    return Tensor.from_op(out, (w,), back, "nbit_weight")


def activation_quant(a, bits: int) -> Tensor:
    """Clamp to [0, 1] then round onto the n-bit grid; STE gated to [0, 1]."""
    a = as_tensor(a)
    scale = grid_scale(bits)
    clamped = np.clip(a.data, 0.0, 1.0)
    out = clamped if _surrogate else round_half_away(clamped * scale) / scale

    def back(g):
        return (ste_backward(g, a.data, (0.0, 1.0)),)

    return Tensor.from_op(out.astype(a.dtype), (a,), back, "activation_quant")


def quantize_weight_tensor(w, bits: int, per_filter: bool = True, per_filter_max: bool = False) -> Tensor:
    if bits >= FULL_PRECISION:
        return as_tensor(w)
    if bits == 1:
        return binary_weight(w, per_filter=per_filter)
    return nbit_weight(w, bits, per_filter_max=per_filter_max)


def quantize_activation_tensor(a, bits: int) -> Tensor:
    if bits >= FULL_PRECISION:
        return as_tensor(a)
    return activation_quant(a, bits)


def effective_weight(w: np.ndarray, bits: int, per_filter: bool = True, per_filter_max: bool = False) -> np.ndarray:
    """The weight values a quantized layer actually convolves with."""
    if bits >= FULL_PRECISION:
        return np.asarray(w).copy()
    if bits == 1:
        alpha, b = binarize_weights(w, per_filter=per_filter)
        return alpha * b
    return quantize_weights_nbit(w, bits, per_filter_max=per_filter_max)
