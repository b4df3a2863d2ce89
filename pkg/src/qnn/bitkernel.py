"""Bit-packed 1-bit inference: XNOR / popcount dot products and convolution.

Packing layout
--------------
A ``+-1`` tensor of logical shape ``(..., L)`` is packed along its last
(reduction) axis into ``ceil(L / 64)`` little-endian ``uint64`` words per row.
Element ``i`` lives in word ``i // 64`` at bit ``i % 64`` (LSB first); bit 1
encodes +1, bit 0 encodes -1.  The ``64 * words - L`` trailing padding bits are
written as 0 and masked out of every popcount, so their content never
matters.

For ``+-1`` vectors ``a . b = 2 * popcount(XNOR(a, b)) - L``.

Convolutions pack the im2col rows (order ``c, ky, kx``, matching
``W.reshape(F, -1)``).  Two activation conventions are supported:

* ``"pm1"``: activations are ``+-1``.  Zero padding at the borders is not a
  ``+-1`` value, so each row also carries a validity mask and the dot product
  only runs over valid bits.
* ``"01"``: activations are ``{0, 1}`` (the 1-bit activation grid).  They are
  packed as ``a_hat = 2a - 1`` and the result is corrected with
  ``a . b = (a_hat . b + sum(b)) / 2``; padded zeros are just ``a = 0``.

Either way the integer accumulator is exact and each output gets a single
float multiply by the filter scale ``alpha``.

``BPK1`` model-container section (little-endian)::

    u32 count
    count x {
        u32 module, u32 slot (0 plain conv, 1 block conv1, 2 block conv2),
        u32 filters F, u32 length L (= C*k*k), u32 words W,
        F x f64 alpha,
        F*W x u64 packed sign bits (row-major)
    }
"""

from __future__ import annotations

import math
import struct
import time
from dataclasses import dataclass

import numpy as np

from .core import functional as F
from .core.container import load_network
from .core.layers import Conv, ResidualBlock
from .core.tensor import Tensor, no_grad
from .errors import ParseError, PrecisionError, ShapeError
from .quant import binarize_weights

WORD = 64
MODES = ("pm1", "01")


@dataclass
class PackedTensor:
    shape: tuple
    words: np.ndarray
    pad_bits: int
    alpha: np.ndarray | None = None
    valid: np.ndarray | None = None
    geometry: tuple | None = None  # (N, out_h, out_w) for packed conv inputs

    @property
    def length(self) -> int:
        return self.shape[-1]


def n_words(length: int) -> int:
    return max(1, math.ceil(length / WORD))


def _pack_bits(bits: np.ndarray) -> np.ndarray:
    L = bits.shape[-1]
    nw = n_words(L)
    pad = nw * WORD - L
    if pad:
        bits = np.concatenate([bits, np.zeros(bits.shape[:-1] + (pad,), dtype=bool)], axis=-1)
    packed = np.packbits(bits, axis=-1, bitorder="little")
    return np.ascontiguousarray(packed).view("<u8").astype(np.uint64)


def pack(t, alpha=None) -> PackedTensor:
    """Pack a tensor of exact +-1 values along its last axis."""
    t = np.asarray(t.data if isinstance(t, Tensor) else t)
    if t.ndim == 0:
        t = t.reshape(1)
    bad = (t != 1) & (t != -1)
    if bad.any():
        where = tuple(int(i) for i in np.unravel_index(int(np.argmax(bad)), t.shape))
        raise PrecisionError(f"pack needs exact +-1 values; element {where} is {t[where]!r}")
    words = _pack_bits(t > 0)
    return PackedTensor(tuple(t.shape), words, words.shape[-1] * WORD - t.shape[-1],
                        None if alpha is None else np.asarray(alpha, dtype=np.float64))


def unpack(p: PackedTensor) -> np.ndarray:
    bits = np.unpackbits(p.words.astype("<u8").view(np.uint8), axis=-1, bitorder="little")
    bits = bits[..., :p.length]
    return np.where(bits == 1, 1.0, -1.0).reshape(p.shape)


def tail_mask(length: int) -> np.ndarray:
    """Per-word mask with 1s on the bits that hold real elements."""
    nw = n_words(length)
    mask = np.full(nw, np.uint64(0xFFFFFFFFFFFFFFFF), dtype=np.uint64)
    rem = length - (nw - 1) * WORD
    if rem < WORD:
        mask[-1] = np.uint64((1 << rem) - 1)
    return mask


def popcount_native(words) -> np.ndarray:
    return np.bitwise_count(np.asarray(words, dtype=np.uint64)).astype(np.int64)


_M1 = np.uint64(0x5555555555555555)
_M2 = np.uint64(0x3333333333333333)
_M4 = np.uint64(0x0F0F0F0F0F0F0F0F)
_H01 = np.uint64(0x0101010101010101)


def popcount_swar(words) -> np.ndarray:
    """Portable bit-twiddling popcount (no native instruction needed)."""
    x = np.asarray(words, dtype=np.uint64).copy()
    with np.errstate(over="ignore"):
        x = x - ((x >> np.uint64(1)) & _M1)
        x = (x & _M2) + ((x >> np.uint64(2)) & _M2)
        x = (x + (x >> np.uint64(4))) & _M4
        x = (x * _H01) >> np.uint64(56)
    return x.astype(np.int64)


popcount = popcount_native if hasattr(np, "bitwise_count") else popcount_swar


def xnor_dot(a: PackedTensor, b: PackedTensor, length: int | None = None) -> int:
    """Integer dot product of two packed +-1 vectors."""
    L = a.length if length is None else int(length)
    if a.length != b.length or a.length != L:
        raise ShapeError(f"xnor_dot length mismatch: {a.length}, {b.length}, L={L}")
    wa, wb = a.words.reshape(-1), b.words.reshape(-1)
    x = ~(wa ^ wb) & tail_mask(L)
    return int(2 * popcount(x).sum() - L)


def xnor_gemm(a: PackedTensor, b: PackedTensor, chunk: int = 4096) -> np.ndarray:
    """All-pairs dot products of the rows of ``a`` and ``b`` (int64 matrix).

    Honours ``a.valid`` (per-row validity mask) when present.
    """
    if a.length != b.length:
        raise ShapeError(f"xnor_gemm length mismatch: {a.length} vs {b.length}")
    L = a.length
    wa = a.words.reshape(-1, a.words.shape[-1])
    wb = b.words.reshape(-1, b.words.shape[-1])
    mask = tail_mask(L)
    out = np.empty((wa.shape[0], wb.shape[0]), dtype=np.int64)
    valid = None if a.valid is None else a.valid.reshape(wa.shape)
    for s in range(0, wa.shape[0], chunk):
        x = ~(wa[s:s + chunk, None, :] ^ wb[None, :, :]) & mask
        if valid is None:
            out[s:s + chunk] = 2 * popcount(x).sum(axis=-1) - L
        else:
            v = valid[s:s + chunk] & mask
            agree = popcount(x & v[:, None, :]).sum(axis=-1)
            out[s:s + chunk] = 2 * agree - popcount(v).sum(axis=-1)[:, None]
    return out


# -- convolution -----------------------------------------------------------

def pack_weights(b, alpha=None) -> PackedTensor:
    """Pack +-1 filters ``(F, C, k, k)``; ``alpha`` defaults to ones."""
    b = np.asarray(b)
    if b.ndim != 4:
        raise ShapeError(f"filters must be (F, C, k, k), got {b.shape}")
    alpha = np.ones(b.shape[0]) if alpha is None else np.asarray(alpha, dtype=np.float64).reshape(-1)
    if alpha.shape[0] != b.shape[0]:
        raise ShapeError(f"{alpha.shape[0]} scale factors for {b.shape[0]} filters")
    p = pack(b.reshape(b.shape[0], -1), alpha)
    p.geometry = tuple(b.shape)
    return p


def pack_activations(x, kernel: int, stride: int = 1, pad: int = 0, mode: str = "pm1") -> PackedTensor:
    """im2col then pack.  ``x`` is ``(N, C, H, W)`` with values per ``mode``."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ShapeError(f"activations must be (N, C, H, W), got {x.shape}")
    if mode == "01":
        bad = (x != 0) & (x != 1)
        if bad.any():
            where = tuple(int(i) for i in np.unravel_index(int(np.argmax(bad)), x.shape))
            raise PrecisionError(f"01-mode activations must be 0 or 1; element {where} is {x[where]!r}")
        x = 2.0 * x - 1.0
    elif ((x != 1) & (x != -1)).any():
        bad = (x != 1) & (x != -1)
        where = tuple(int(i) for i in np.unravel_index(int(np.argmax(bad)), x.shape))
        raise PrecisionError(f"pm1-mode activations must be +-1; element {where} is {x[where]!r}")
    n, _, h, w = x.shape
    oh, ow = F.conv_output_size(h, kernel, stride, pad), F.conv_output_size(w, kernel, stride, pad)
    cols = F.im2col(x, kernel, stride, pad)
    words = _pack_bits(cols > 0)
    valid = None
    if mode == "pm1" and pad > 0:
        valid = _pack_bits(F.im2col(np.ones_like(x), kernel, stride, pad) > 0)
    return PackedTensor(tuple(cols.shape), words, words.shape[-1] * WORD - cols.shape[1],
                        valid=valid, geometry=(n, oh, ow))


def binary_conv2d(xp: PackedTensor, wp: PackedTensor, alpha=None, mode: str = "pm1") -> np.ndarray:
    """Packed convolution; returns ``(N, F, out_h, out_w)`` float64.

    ``alpha`` overrides ``wp.alpha``.  In ``"01"`` mode ``xp`` must come from
    :func:`pack_activations` with ``mode="01"``.
    """
    if xp.geometry is None or len(xp.geometry) != 3:
        raise ShapeError("activations were not packed by pack_activations")
    if xp.length != wp.length:
        raise ShapeError(f"activation rows have length {xp.length}, filters {wp.length}")
    a = wp.alpha if alpha is None else np.asarray(alpha, dtype=np.float64).reshape(-1)
    if a is None:
        a = np.ones(wp.shape[0])
    acc = xnor_gemm(xp, wp)
    if mode == "01":
        wsum = 2 * popcount(wp.words & tail_mask(wp.length)).sum(axis=-1) - wp.length
        acc = (acc + wsum[None, :]) // 2
    elif mode != "pm1":
        raise ValueError(f"mode must be one of {MODES}")
    n, oh, ow = xp.geometry
    out = acc.astype(np.float64) * a[None, :]
    return out.reshape(n, oh, ow, -1).transpose(0, 3, 1, 2).copy()


def conv2d_packed(x, b, alpha=None, stride: int = 1, pad: int = 0, mode: str = "pm1") -> np.ndarray:
    wp = pack_weights(b, alpha)
    xp = pack_activations(x, wp.geometry[2], stride, pad, mode)
    return binary_conv2d(xp, wp, mode=mode)


# -- network integration ---------------------------------------------------

def binary_convs(net):
    """``(module index, slot, Conv)`` for every conv with 1-bit weights and activations."""
    out = []
    for i, mod in enumerate(net.modules):
        if isinstance(mod, ResidualBlock):
            pairs = ((1, mod.conv1), (2, mod.conv2))
        elif isinstance(mod, Conv):
            pairs = ((0, mod),)
        else:
            continue
        for slot, conv in pairs:
            if conv.weight_bits == 1 and conv.act_bits == 1:
                out.append((i, slot, conv))
    return out


def conv_packed_weights(conv: Conv) -> PackedTensor:
    alpha, b = binarize_weights(conv.weight.data)
    return pack_weights(b, alpha.reshape(-1))


def install_packed(net, packed=None):
    """Route every eligible conv of ``net`` through the packed kernel.

    ``packed`` maps ``(module, slot)`` to a :class:`PackedTensor`; by default
    the weights are packed from the network's master weights.
    """
    installed = []
    for i, slot, conv in binary_convs(net):
        wp = packed[(i, slot)] if packed else conv_packed_weights(conv)

        def run(x, wp=wp, conv=conv):
            xp = pack_activations(x, conv.kernel, conv.stride, conv.pad, mode="01")
            return binary_conv2d(xp, wp, mode="01")

        conv.packed = run
        installed.append((i, slot))
    return installed


def uninstall_packed(net):
    for _, _, conv in binary_convs(net):
        conv.packed = None


def encode_bpk1(net) -> bytes:
    entries = binary_convs(net)
    parts = [struct.pack("<I", len(entries))]
    for i, slot, conv in entries:
        wp = conv_packed_weights(conv)
        f, L = wp.shape
        parts.append(struct.pack("<IIIII", i, slot, f, L, wp.words.shape[-1]))
        parts.append(np.ascontiguousarray(wp.alpha, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(wp.words, dtype="<u8").tobytes())
    return b"".join(parts)


def decode_bpk1(data: bytes) -> dict:
    """Inverse of :func:`encode_bpk1`: ``{(module, slot): PackedTensor}``."""
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(data):
            raise ParseError(f"truncated BPK1 section while reading {what}", off)
        chunk = data[off:off + n]
        off += n
        return chunk

    (count,) = struct.unpack("<I", take(4, "count"))
    out = {}
    for _ in range(count):
        i, slot, f, L, nw = struct.unpack("<IIIII", take(20, "entry header"))
        if nw != n_words(L):
            raise ParseError(f"BPK1 entry has {nw} words for length {L}", off - 4)
        alpha = np.frombuffer(take(8 * f, "alpha"), dtype="<f8").astype(np.float64)
        words = np.frombuffer(take(8 * f * nw, "words"), dtype="<u8").astype(np.uint64).reshape(f, nw)
        out[(i, slot)] = PackedTensor((f, L), words, nw * WORD - L, alpha)
    if off != len(data):
        raise ParseError("trailing bytes after BPK1 entries", off)
    return out


def packed_weight_bytes(filters: int, length: int) -> int:
    return n_words(length) * 8 * filters


def float_weight_bytes(filters: int, length: int) -> int:
    return filters * length * 4


def bench(model_file, input_shape=None, repeats: int = 10, seed: int = 0, log=print) -> dict:
    """Time the float and packed paths of every 1-bit conv in a saved model.

    Each eligible conv is fed random ``{0, 1}`` activations of its own input
    geometry (batch size from ``input_shape[0]``, default 1).  Layers that are
    not 1-bit in both weights and activations are skipped with a notice.
    """
    net, sections = load_network(model_file)
    batch = 1 if input_shape is None else int(input_shape[0])
    if input_shape is not None and tuple(input_shape[1:]) != tuple(net.spec.input_shape):
        raise ShapeError(f"model expects inputs {net.spec.input_shape}, got {tuple(input_shape[1:])}")
    packed = decode_bpk1(sections["BPK1"]) if "BPK1" in sections else None
    shapes = [tuple(net.spec.input_shape)] + net.spec.infer_shapes()
    rng = np.random.default_rng(seed)
    eligible = {(i, s) for i, s, _ in binary_convs(net)}
    layers, skipped = [], []
    for i, mod in enumerate(net.modules):
        convs = ((1, mod.conv1), (2, mod.conv2)) if isinstance(mod, ResidualBlock) else (
            ((0, mod),) if isinstance(mod, Conv) else ())
        for slot, conv in convs:
            if (i, slot) not in eligible:
                skipped.append({"module": i, "slot": slot, "weight_bits": conv.weight_bits,
                                "act_bits": conv.act_bits})
                if log:
                    log(f"skipping layer {i}/{slot}: not 1-bit ({conv.weight_bits}w/{conv.act_bits}a)")
                continue
            cin = conv.weight.shape[1]
            c, h, w = shapes[i]
            if slot == 2:
                # conv2 sees conv1's output resolution
                h = F.conv_output_size(h, conv.kernel, net.modules[i].spec.stride, conv.pad)
                w = F.conv_output_size(w, conv.kernel, net.modules[i].spec.stride, conv.pad)
            x = rng.integers(0, 2, size=(batch, cin, h, w)).astype(np.float64)
            wp = packed[(i, slot)] if packed else conv_packed_weights(conv)
            alpha, b = wp.alpha, unpack(wp).reshape(conv.weight.shape)
            f_cnt, length = wp.shape
            rec = {"module": i, "slot": slot, "filters": f_cnt, "length": length,
                   "packed_bytes": packed_weight_bytes(f_cnt, length),
                   "float_bytes": float_weight_bytes(f_cnt, length)}
            if repeats > 0:
                wf = alpha[:, None, None, None] * b
                with no_grad():
                    t0 = time.perf_counter()
                    for _ in range(repeats):
                        ref = F.conv2d(Tensor(x), Tensor(wf), conv.stride, conv.pad).data
                    t_float = (time.perf_counter() - t0) / repeats
                t0 = time.perf_counter()
                for _ in range(repeats):
                    got = binary_conv2d(pack_activations(x, conv.kernel, conv.stride, conv.pad, "01"), wp, mode="01")
                t_packed = (time.perf_counter() - t0) / repeats
                rec.update({"float_seconds": t_float, "packed_seconds": t_packed,
                            "speedup": t_float / t_packed if t_packed > 0 else float("inf"),
                            "max_abs_diff": float(np.max(np.abs(ref - got)))})
            layers.append(rec)
    report = {
        "repeats": int(repeats),
        "layers": layers,
        "skipped": skipped,
        "packed_bytes": int(sum(r["packed_bytes"] for r in layers)),
        "float_bytes": int(sum(r["float_bytes"] for r in layers)),
    }
    if report["packed_bytes"]:
        report["memory_ratio"] = report["float_bytes"] / report["packed_bytes"]
    if repeats > 0 and layers:
        tf = sum(r["float_seconds"] for r in layers)
        tp = sum(r["packed_seconds"] for r in layers)
        report.update({"float_seconds": tf, "packed_seconds": tp, "speedup": tf / tp if tp else float("inf")})
    return report
