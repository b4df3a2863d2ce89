"""Differentiable ops on :class:`~qnn.core.tensor.Tensor`.

Conv layout follows the patch-matrix form: ``im2col`` turns an
``(N, C, H, W)`` input into a matrix with one row per output position and
``C*k*k`` columns (channel-major, then kernel row, then kernel column), so a
convolution is ``im2col(x) @ F`` with ``F`` of shape ``(C*k*k, n_filters)``.
"""

from __future__ import annotations

import contextlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError
from .tensor import Tensor, as_tensor

# "blas": fast BLAS matmul.  "sorted": each output element is the sequential
# sum of its products sorted by value, which makes the result independent of
# the reduction order and of exact-zero terms (used for structural checks).
_accumulation = "blas"


@contextlib.contextmanager
def exact_accumulation():
    """Route conv/linear reductions through the order-canonical summation."""
    global _accumulation
    prev = _accumulation
    _accumulation = "sorted"
    try:
        yield
    finally:
        _accumulation = prev


def _canonical_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    n = b.shape[1]
    out = np.empty((m, n), dtype=np.result_type(a, b))
    rows = max(1, (1 << 22) // max(1, k * n))
    for start in range(0, m, rows):
        prods = a[start:start + rows, :, None] * b[None, :, :]
        prods.sort(axis=1)
        out[start:start + rows] = np.cumsum(prods, axis=1)[:, -1, :]
    return out


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if _accumulation == "sorted":
        return _canonical_matmul(a, b)
    return a @ b


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor.from_op(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor.from_op(a.data - b.data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor.from_op(a.data * b.data, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def back(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return Tensor.from_op(out, (a, b), back, "div")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def back(g):
        return (g * mask,)

    return Tensor.from_op(np.where(mask, x.data, 0.0).astype(x.dtype), (x,), back, "relu")


def abs(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    """|x| with subgradient 0 at 0."""
    x = as_tensor(x)

    def back(g):
        return (g * np.sign(x.data),)

    return Tensor.from_op(np.abs(x.data), (x,), back, "abs")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)

    def back(g):
        return (g * (1.0 - t * t),)

    return Tensor.from_op(t, (x,), back, "tanh")


def exp(x) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.data)

    def back(g):
        return (g * e,)

    return Tensor.from_op(e, (x,), back, "exp")


def log(x) -> Tensor:
    x = as_tensor(x)

    def back(g):
        return (g / x.data,)

    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return Tensor.from_op(out, (x,), back, "log")


# -- reductions and shape ------------------------------------------------

def sum(x, axis=None) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis)

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor.from_op(np.asarray(out), (x,), back, "sum")


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    out = np.mean(x.data, axis=axis)

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return Tensor.from_op(np.asarray(out), (x,), back, "mean")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None

    def back(g):
        return (g.reshape(x.shape),)

    return Tensor.from_op(out, (x,), back, "reshape")


def flatten(x) -> Tensor:
    x = as_tensor(x)
    return reshape(x, (x.shape[0], -1))


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {x.shape}")

    def back(g):
        return (g.T,)

    return Tensor.from_op(x.data.T, (x,), back, "transpose")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")

    def back(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor.from_op(_mm(a.data, b.data), (a, b), back, "matmul")


# -- layers --------------------------------------------------------------

def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped (out_features, in_features)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} vs weight {weight.shape}")
    out = _mm(x.data, weight.data.T)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias {bias.shape} vs {weight.shape[0]} outputs")
        out = out + bias.data
        parents.append(bias)

    def back(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return Tensor.from_op(out, parents, back, "linear")


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def im2col(x: np.ndarray, kernel, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Patch matrix of ``x`` (N, C, H, W): shape (N*oh*ow, C*kh*kw)."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"im2col expects (N, C, H, W), got {x.shape}")
    kh, kw = (kernel, kernel) if np.isscalar(kernel) else tuple(kernel)
    n, c, h, w = x.shape
    oh = conv_output_size(h, kh, stride, pad)
    ow = conv_output_size(w, kw, stride, pad)
    if oh <= 0 or ow <= 0 or stride < 1 or pad < 0:
        raise ShapeError(
            f"im2col: input {h}x{w}, kernel {kh}x{kw}, stride {stride}, pad {pad} "
            f"gives output {oh}x{ow}"
        )
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)


def col2im(cols: np.ndarray, x_shape, kernel, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch rows back into an image."""
    kh, kw = (kernel, kernel) if np.isscalar(kernel) else tuple(kernel)
    n, c, h, w = x_shape
    oh = conv_output_size(h, kh, stride, pad)
    ow = conv_output_size(w, kw, stride, pad)
    d = cols.reshape(n, oh, ow, c, kh, kw)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += d[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    if pad:
        out = out[:, :, pad : pad + h, pad : pad + w]
    return out


def conv2d(x, weight, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation via im2col; ``weight`` is (n, C, kh, kw), no bias."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: input {x.shape}, weight {weight.shape}")
    n_f, c, kh, kw = weight.shape
    if x.shape[1] != c:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, weight expects {c}")
    cols = im2col(x.data, (kh, kw), stride, pad)
    wm = weight.data.reshape(n_f, -1)
    n = x.shape[0]
    oh = conv_output_size(x.shape[2], kh, stride, pad)
    ow = conv_output_size(x.shape[3], kw, stride, pad)
    out = _mm(cols, wm.T).reshape(n, oh, ow, n_f).transpose(0, 3, 1, 2)

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, n_f)
        dw = (g2.T @ cols).reshape(weight.shape)
        dx = col2im(g2 @ wm, x.shape, (kh, kw), stride, pad) if x.requires_grad else None
        return dx, dw

    return Tensor.from_op(np.ascontiguousarray(out), (x, weight), back, "conv2d")


def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation over all axes but 1.

    In training mode batch statistics are used and the running buffers are
    updated in place: ``running = momentum * running + (1 - momentum) * batch``
    (the running variance uses the unbiased batch estimate).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: {c} channels but gamma {gamma.shape}, beta {beta.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    m = x.size // c
    g_b = gamma.data.reshape(bshape)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_var *= momentum
        running_var += (1.0 - momentum) * unbiased
    else:
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * g_b + beta.data.reshape(bshape)

    def back(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * g_b
        if training:
            dx = (inv_std.reshape(bshape) / m) * (
                m * dxhat
                - dxhat.sum(axis=axes).reshape(bshape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            dx = dxhat * inv_std.reshape(bshape)
        return dx, dgamma, dbeta

    return Tensor.from_op(out, (x, gamma, beta), back, "batch_norm")


def max_pool2d(x, kernel: int) -> Tensor:
    """Non-overlapping max pooling (stride == kernel); ties go to the first max."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    k = kernel
    if h % k or w % k:
        raise ShapeError(f"max_pool2d: {h}x{w} not divisible by kernel {k}")
    blocks = x.data.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5)
    flat = blocks.reshape(n, c, h // k, w // k, k * k)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def back(g):
        d = np.zeros_like(flat)
        np.put_along_axis(d, idx[..., None], g[..., None], axis=-1)
        d = d.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5)
        return (d.reshape(n, c, h, w),)

    return Tensor.from_op(out, (x,), back, "max_pool2d")


def global_avg_pool2d(x) -> Tensor:
    x = as_tensor(x)
    n, c, h, w = x.shape

    def back(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return Tensor.from_op(x.data.mean(axis=(2, 3)), (x,), back, "global_avg_pool2d")


def channel_map(x, index_map, stride: int = 1) -> Tensor:
    """Select/reorder channels of ``x`` and optionally subsample spatially.

    ``index_map[i]`` is the source channel for output channel ``i``, or -1 for
    a zero channel.  This realises identity shortcuts whose channel sets differ
    (zero padding / shrinking).
    """
    x = as_tensor(x)
    idx = np.asarray(index_map, dtype=np.int64)
    if idx.size and idx.max() >= x.shape[1]:
        raise ShapeError(f"channel_map: index {idx.max()} out of range for {x.shape[1]} channels")
    src = x.data[:, :, ::stride, ::stride] if x.ndim == 4 and stride > 1 else x.data
    out_shape = (src.shape[0], idx.size) + src.shape[2:]
    out = np.zeros(out_shape, dtype=x.dtype)
    valid = idx >= 0
    out[:, valid] = src[:, idx[valid]]

    def back(g):
        dsrc = np.zeros(src.shape, dtype=g.dtype)
        np.add.at(dsrc, (slice(None), idx[valid]), g[:, valid])
        if x.ndim == 4 and stride > 1:
            dx = np.zeros(x.shape, dtype=g.dtype)
            dx[:, :, ::stride, ::stride] = dsrc
            return (dx,)
        return (dsrc,)

    return Tensor.from_op(out, (x,), back, "channel_map")


# -- losses --------------------------------------------------------------

def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    out = _log_softmax(x.data)
    p = np.exp(out)

    def back(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return Tensor.from_op(out, (x,), back, "log_softmax")


def cross_entropy(logits, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: labels {labels.shape} for logits {logits.shape}")
    logp = _log_softmax(logits.data)
    loss = -logp[np.arange(n), labels].mean()

    def back(g):
        d = np.exp(logp)
        d[np.arange(n), labels] -= 1.0
        return (d * (g / n),)

    return Tensor.from_op(np.asarray(loss), (logits,), back, "cross_entropy")


def soft_cross_entropy(logits, target_probs, temperature: float = 1.0) -> Tensor:
    """Mean over the batch of H(target, softmax(logits / temperature)).

    ``target_probs`` is treated as a constant.
    """
    logits = as_tensor(logits)
    t = np.asarray(target_probs, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise ShapeError(f"soft_cross_entropy: target {t.shape} vs logits {logits.shape}")
    n = logits.shape[0]
    logq = _log_softmax(logits.data / temperature)
    loss = -(t * logq).sum() / n

    def back(g):
        q = np.exp(logq)
        return ((q * t.sum(axis=-1, keepdims=True) - t) * (g / (n * temperature)),)

    return Tensor.from_op(np.asarray(loss), (logits,), back, "soft_cross_entropy")
