"""Dataset loading: IDX image sets, CSV tables, sklearn digits and synthetics.

Every loader returns a :class:`Dataset` with standardised inputs (train-split
mean/std) and integer labels.  Augmentation (random crop with zero padding,
horizontal mirroring) is exposed as a callable and only ever applied to
training batches by the trainer.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ConfigError, ParseError

IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


@dataclass
class Dataset:
    name: str
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    num_classes: int
    mean: np.ndarray
    std: np.ndarray
    crop: int = 0
    mirror: bool = False

    @property
    def input_shape(self):
        return tuple(self.x_train.shape[1:])

    def augmenter(self):
        """``augment(xb, rng)`` for image batches, or None when disabled."""
        if self.x_train.ndim != 4 or (not self.crop and not self.mirror):
            return None
        return lambda xb, rng: augment(xb, rng, self.crop, self.mirror)


def augment(xb, rng, crop: int = 0, mirror: bool = False):
    out = np.array(xb, copy=True)
    n, _, h, w = out.shape
    if crop:
        padded = np.pad(out, ((0, 0), (0, 0), (crop, crop), (crop, crop)))
        dy = rng.integers(0, 2 * crop + 1, size=n)
        dx = rng.integers(0, 2 * crop + 1, size=n)
        for i in range(n):
            out[i] = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
    if mirror:
        flip = rng.random(n) < 0.5
        out[flip] = out[flip][..., ::-1]
    return out


def _standardise(x_train, x_test):
    axes = (0, 2, 3) if x_train.ndim == 4 else (0,)
    mean = x_train.mean(axis=axes, keepdims=True)
    std = x_train.std(axis=axes, keepdims=True)
    std = np.where(std > 0, std, 1.0)
    return (x_train - mean) / std, (x_test - mean) / std, mean.reshape(-1), std.reshape(-1)


def _split(x, y, test_fraction, seed):
    order = np.random.default_rng(seed).permutation(len(x))
    n_test = int(round(len(x) * test_fraction))
    test, train = order[:n_test], order[n_test:]
    return x[train], y[train], x[test], y[test]


def _finish(name, x_tr, y_tr, x_te, y_te, num_classes=None, crop=0, mirror=False) -> Dataset:
    x_tr, x_te, mean, std = _standardise(x_tr.astype(np.float64), x_te.astype(np.float64))
    y_tr, y_te = y_tr.astype(np.int64), y_te.astype(np.int64)
    k = int(num_classes or (max(y_tr.max(initial=0), y_te.max(initial=0)) + 1))
    for y in (y_tr, y_te):
        if y.size and (y.min() < 0 or y.max() >= k):
            raise ConfigError(f"labels must lie in [0, {k})")
    return Dataset(name, x_tr, y_tr, x_te, y_te, k, mean, std, crop, mirror)


# -- IDX -------------------------------------------------------------------

def parse_idx(buf: bytes) -> np.ndarray:
    if len(buf) < 4 or buf[0] != 0 or buf[1] != 0:
        raise ParseError("bad IDX magic (expected two zero bytes)", 0)
    code, ndim = buf[2], buf[3]
    if code not in IDX_TYPES:
        raise ParseError(f"unknown IDX element type 0x{code:02x}", 2)
    if ndim == 0:
        raise ParseError("IDX file declares zero dimensions", 3)
    end = 4 + 4 * ndim
    if len(buf) < end:
        raise ParseError("IDX header truncated", len(buf))
    dims = struct.unpack(f">{ndim}I", buf[4:end])
    dtype = np.dtype(IDX_TYPES[code])
    need = int(np.prod(dims)) * dtype.itemsize
    if len(buf) - end < need:
        raise ParseError(f"IDX body truncated: {len(buf) - end} of {need} bytes", len(buf))
    if len(buf) - end > need:
        raise ParseError("trailing bytes after IDX body", end + need)
    return np.frombuffer(buf, dtype=dtype, count=int(np.prod(dims)), offset=end).reshape(dims)


def read_idx(path) -> np.ndarray:
    return parse_idx(Path(path).read_bytes())


def write_idx(path, arr) -> None:
    arr = np.asarray(arr)
    code = {np.dtype("uint8"): 0x08, np.dtype("int8"): 0x09, np.dtype("int16"): 0x0B,
            np.dtype("int32"): 0x0C, np.dtype("float32"): 0x0D, np.dtype("float64"): 0x0E}[arr.dtype]
    body = arr.astype(IDX_TYPES[code]).tobytes()
    Path(path).write_bytes(bytes([0, 0, code, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape) + body)


IDX_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
             "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


def load_idx_dir(path, crop=0, mirror=False) -> Dataset:
    """MNIST-style directory holding the four standard IDX files."""
    root = Path(path)
    arrays = []
    for name in IDX_FILES:
        f = root / name
        if not f.exists():
            raise ConfigError(f"missing IDX file {f}")
        arrays.append(read_idx(f))
    x_tr, y_tr, x_te, y_te = arrays
    if x_tr.ndim == 3:
        x_tr, x_te = x_tr[:, None], x_te[:, None]
    return _finish(root.name or "idx", x_tr, y_tr, x_te, y_te, crop=crop, mirror=mirror)


# -- CSV -------------------------------------------------------------------

def parse_csv(buf: bytes, n_features: int | None = None):
    """Rows of numbers, label in the last column; an optional header line is skipped."""
    text = buf.decode("utf-8")
    offset = 0
    rows, labels = [], []
    width = None
    for lineno, line in enumerate(io.StringIO(text, newline="")):
        start = offset
        offset += len(line.encode("utf-8"))
        if not line.strip():
            continue
        fields = next(csv.reader([line]))
        try:
            vals = [float(v) for v in fields]
        except ValueError:
            if lineno == 0:
                continue
            raise ParseError(f"non-numeric value on line {lineno + 1}", start) from None
        if width is None:
            width = len(vals)
            if n_features is not None and width != n_features + 1:
                raise ParseError(f"expected {n_features} features + label, found {width} columns", start)
        elif len(vals) != width:
            raise ParseError(f"line {lineno + 1} has {len(vals)} columns, expected {width}", start)
        label = vals[-1]
        if label != int(label) or label < 0:
            raise ParseError(f"label {label} on line {lineno + 1} is not a non-negative integer", start)
        rows.append(vals[:-1])
        labels.append(int(label))
    if not rows:
        raise ParseError("no data rows", 0)
    return np.asarray(rows, dtype=np.float64), np.asarray(labels, dtype=np.int64)


def load_csv(path, test_fraction=0.25, seed=0, n_features=None) -> Dataset:
    x, y = parse_csv(Path(path).read_bytes(), n_features)
    return _finish(Path(path).stem, *_split(x, y, test_fraction, seed))


# -- built-in --------------------------------------------------------------

def make_blobs(n=200, classes=2, features=2, seed=0, spread=1.0):
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-5, 5, size=(classes, features))
    y = np.arange(n) % classes
    x = centers[y] + spread * rng.standard_normal((n, features))
    return x, y


def make_spirals(n=200, noise=0.1, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    t = np.sqrt(rng.random(n)) * 3 * np.pi
    r = t / (3 * np.pi)
    sgn = np.where(y == 0, 1.0, -1.0)
    x = np.stack([sgn * r * np.cos(t), sgn * r * np.sin(t)], axis=1)
    return x + noise * rng.standard_normal(x.shape), y


def load_digits(test_size=397, seed=0, crop=0, mirror=False) -> Dataset:
    """sklearn's 8x8 handwritten digits (1797 images, 10 classes)."""
    from sklearn.datasets import load_digits as _digits

    d = _digits()
    x = d.images[:, None].astype(np.float64)
    y = d.target.astype(np.int64)
    order = np.random.default_rng(seed).permutation(len(x))
    test, train = order[:test_size], order[test_size:]
    return _finish("digits", x[train], y[train], x[test], y[test], 10, crop, mirror)


def load_dataset(id: str, path=None, seed: int = 0, **opts) -> Dataset:  # noqa: A002
    """Dispatch on ``id``: ``idx``, ``csv``, ``digits``, ``blobs``, ``spirals``."""
    if id == "idx":
        if path is None:
            raise ConfigError("idx dataset needs a path")
        return load_idx_dir(path, opts.get("crop", 0), opts.get("mirror", False))
    if id == "csv":
        if path is None:
            raise ConfigError("csv dataset needs a path")
        return load_csv(path, opts.get("test_fraction", 0.25), seed, opts.get("n_features"))
    if id == "digits":
        return load_digits(opts.get("test_size", 397), seed, opts.get("crop", 0), opts.get("mirror", False))
    if id == "blobs":
        x, y = make_blobs(opts.get("n", 200), opts.get("classes", 2), opts.get("features", 2), seed)
        return _finish("blobs", *_split(x, y, opts.get("test_fraction", 0.25), seed))
    if id == "spirals":
        x, y = make_spirals(opts.get("n", 200), opts.get("noise", 0.1), seed)
        return _finish("spirals", *_split(x, y, opts.get("test_fraction", 0.25), seed))
    raise ConfigError(f"unknown dataset id {id!r}")
