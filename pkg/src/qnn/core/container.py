"""Binary file formats.

Model container (``.qnnf``), all integers little-endian::

    b"QNNF"                      magic
    u32 version                  currently 1
    u32 n                        length of the spec JSON in bytes
    n bytes                      ModelSpec as UTF-8 JSON
    u32 L                        number of layers (== len(spec.layers))
    L x { u64 count, count x f64 }   per-layer parameter blob, declaration order
    optional sections until EOF: 4-byte tag, u64 length, payload

A layer blob holds that layer's parameters followed by its buffers, each
flattened in C order (conv: weight; linear: weight, bias; batchnorm: gamma,
beta, running_mean, running_var; residual-block: conv1.weight, bn1.gamma,
bn1.beta, conv2.weight, bn2.gamma, bn2.beta, bn1 buffers, bn2 buffers).

Matrix file (feature matrices, cached teacher logits)::

    u64 rows, u64 cols, rows*cols x f64 row-major
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import ParseError
from .spec import ModelSpec

MAGIC = b"QNNF"
VERSION = 1


def write_model(path, spec: ModelSpec, blobs, sections=None) -> None:
    payload = spec.to_json().encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(payload)), payload,
             struct.pack("<I", len(blobs))]
    for blob in blobs:
        arr = np.ascontiguousarray(blob, dtype="<f8").reshape(-1)
        parts.append(struct.pack("<Q", arr.size))
        parts.append(arr.tobytes())
    for tag, data in (sections or {}).items():
        tag_b = tag.encode("ascii")
        if len(tag_b) != 4:
            raise ValueError(f"section tag must be 4 ASCII bytes, got {tag!r}")
        parts += [tag_b, struct.pack("<Q", len(data)), bytes(data)]
    Path(path).write_bytes(b"".join(parts))


def read_model(path):
    """Return ``(spec, blobs, sections)``."""
    buf = Path(path).read_bytes()
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(buf):
            raise ParseError(f"truncated model file while reading {what}", off)
        chunk = buf[off:off + n]
        off += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise ParseError("bad magic, not a QNNF model file", 0)
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise ParseError(f"unsupported container version {version}", 4)
    (n,) = struct.unpack("<I", take(4, "spec length"))
    start = off
    try:
        spec = ModelSpec.from_json(take(n, "spec").decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise ParseError(f"invalid spec JSON: {exc}", start) from None
    (n_layers,) = struct.unpack("<I", take(4, "layer count"))
    if n_layers != len(spec.layers):
        raise ParseError(f"{n_layers} blobs for {len(spec.layers)} layers", off - 4)
    blobs = []
    for _ in range(n_layers):
        (count,) = struct.unpack("<Q", take(8, "blob length"))
        blobs.append(np.frombuffer(take(8 * count, "blob"), dtype="<f8").astype(np.float64))
    sections = {}
    while off < len(buf):
        tag = take(4, "section tag").decode("ascii", errors="replace")
        (length,) = struct.unpack("<Q", take(8, "section length"))
        sections[tag] = take(length, f"section {tag}")
    return spec, blobs, sections


def save_network(path, net, sections=None) -> None:
    write_model(path, net.spec, net.layer_blobs(), sections)


def load_network(path, dtype=np.float64):
    from .layers import Network
    spec, blobs, sections = read_model(path)
    net = Network(spec, dtype=dtype)
    net.load_layer_blobs(blobs)
    return net, sections


def write_matrix(path, mat) -> None:
    mat = np.ascontiguousarray(mat, dtype="<f8")
    if mat.ndim != 2:
        raise ValueError(f"matrix file needs a 2-D array, got shape {mat.shape}")
    Path(path).write_bytes(struct.pack("<QQ", *mat.shape) + mat.tobytes())


def read_matrix(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 16:
        raise ParseError("matrix file shorter than its 16-byte header", 0)
    rows, cols = struct.unpack("<QQ", buf[:16])
    need = 16 + 8 * rows * cols
    if len(buf) != need:
        raise ParseError(f"matrix file has {len(buf)} bytes, header implies {need}", 16)
    return np.frombuffer(buf[16:], dtype="<f8").reshape(rows, cols).astype(np.float64)
