"""Datasets: IDX container parsing, the synthetic teacher, image loading.

The IDX container is the MNIST-family binary layout: a big-endian header
whose third byte encodes the element dtype and fourth byte the rank,
followed by one 32-bit big-endian extent per dimension and the row-major
payload.  idx_parse returns the stored values untouched (labels must stay
integers and round-trips must be exact); the 1/255 pixel rescale happens
where image Datasets are assembled.
"""

import os
import struct
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Dataset",
    "IdxFormatError",
    "idx_parse",
    "idx_serialize",
    "synth_teacher",
    "load_idx_file",
    "load_fashion_mnist",
    "one_hot",
]

# dtype code -> (numpy dtype, element size in bytes)
_IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {
    np.dtype(np.uint8): 0x08,
    np.dtype(np.int8): 0x09,
    np.dtype(np.int16): 0x0B,
    np.dtype(np.int32): 0x0C,
    np.dtype(np.float32): 0x0D,
    np.dtype(np.float64): 0x0E,
}


class IdxFormatError(ValueError):
    """Malformed IDX container: bad magic, unsupported dtype, truncation."""


def idx_parse(buf):
    """Decode one IDX container into a numpy array (values as stored)."""
    buf = bytes(buf)
    if len(buf) < 4:
        raise IdxFormatError(f"header needs 4 bytes, got {len(buf)}")
    z0, z1, code, rank = buf[0], buf[1], buf[2], buf[3]
    if z0 != 0 or z1 != 0:
        raise IdxFormatError(f"bad magic: first two bytes {z0:#04x} {z1:#04x}"
                             " must be zero")
    if code not in _IDX_DTYPES:
        raise IdxFormatError(f"unsupported dtype code {code:#04x}")
    header_end = 4 + 4 * rank
    if len(buf) < header_end:
        raise IdxFormatError(
            f"truncated header: rank {rank} needs {header_end} bytes,"
            f" got {len(buf)}")
    dims = struct.unpack(f">{rank}i", buf[4:header_end])
    if any(d < 0 for d in dims):
        raise IdxFormatError(f"negative dimension in header: {dims}")
    dtype = _IDX_DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    need = header_end + count * dtype.itemsize
    if len(buf) != need:
        raise IdxFormatError(
            f"payload size mismatch: dims {dims} need {need} bytes total,"
            f" got {len(buf)}")
    data = np.frombuffer(buf, dtype=dtype, offset=header_end, count=count)
    return data.astype(dtype.newbyteorder("=")).reshape(dims)


def idx_serialize(arr):
    """Encode an array as an IDX container (inverse of idx_parse)."""
    arr = np.asarray(arr)
    native = arr.dtype.newbyteorder("=")
    if np.dtype(native) not in _IDX_CODES:
        raise IdxFormatError(f"dtype {arr.dtype} has no IDX code")
    code = _IDX_CODES[np.dtype(native)]
    if arr.ndim > 255:
        raise IdxFormatError("rank exceeds one byte")
    head = bytes([0, 0, code, arr.ndim])
    head += struct.pack(f">{arr.ndim}i", *arr.shape)
    big = arr.astype(arr.dtype.newbyteorder(">"), copy=False)
    return head + big.tobytes(order="C")


# ---------------------------------------------------------------------------
# datasets


def one_hot(labels, n_classes):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(
            f"labels span [{labels.min()}, {labels.max()}], outside"
            f" {n_classes} classes")
    return np.eye(n_classes)[labels]


@dataclass
class Dataset:
    """Inputs in [0,1]^D with one-hot labels and a split tag."""

    images: np.ndarray
    labels: np.ndarray
    split: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=float)
        self.labels = np.asarray(self.labels, dtype=float)
        if self.images.ndim != 2 or self.images.shape[0] == 0:
            raise ValueError("images must be a non-empty N x D matrix")
        if self.images.min() < 0.0 or self.images.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        if self.labels.shape[0] != self.images.shape[0]:
            raise ValueError("labels and images disagree on N")
        rows = self.labels.sum(axis=1)
        onehot = np.all((self.labels == 0) | (self.labels == 1))
        if not (onehot and np.all(rows == 1)):
            raise ValueError("labels must be one-hot rows")

    @property
    def n(self):
        return self.images.shape[0]

    @property
    def n_features(self):
        return self.images.shape[1]

    @property
    def n_classes(self):
        return self.labels.shape[1]

    def subset(self, count, start=0):
        return Dataset(self.images[start:start + count],
                       self.labels[start:start + count], split=self.split)


def synth_teacher(n, d, classes, seed):
    """Uniform inputs in [0,1]^d labeled by a frozen random linear teacher.

    The teacher (weights and biases drawn once from the seed) assigns the
    argmax class, so the task is linearly separable by construction and a
    logistic-regression oracle recovers it almost perfectly.
    """
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(classes, d))
    # the intercept centers each class logit at the input mean so no class
    # swallows the whole cube; a small random part keeps the teacher generic
    b = rng.normal(size=classes) * 0.1 - w @ np.full(d, 0.5)
    x = rng.uniform(0.0, 1.0, size=(n, d))
    logits = x @ w.T + b
    labels = np.argmax(logits, axis=1)
    return Dataset(x, one_hot(labels, classes), split=f"synth-{seed}")


def load_idx_file(path):
    try:
        with open(path, "rb") as fh:
            return idx_parse(fh.read())
    except OSError as err:
        raise IdxFormatError(f"cannot read {path}: {err}") from err


_FASHION_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def load_fashion_mnist(directory, split="train", limit=None):
    """Load a Fashion-MNIST style IDX pair from local files (no download).

    Images are flattened to N x 784 and rescaled to [0,1]; labels become
    one-hot over 10 classes.  `limit` truncates to the first samples.
    """
    if split not in _FASHION_FILES:
        raise ValueError(f"split must be one of {sorted(_FASHION_FILES)}")
    img_name, lab_name = _FASHION_FILES[split]
    img_path = os.path.join(directory, img_name)
    lab_path = os.path.join(directory, lab_name)
    for p in (img_path, lab_path):
        if not os.path.exists(p):
            raise FileNotFoundError(f"dataset file missing: {p}")
    images = load_idx_file(img_path)
    labels = load_idx_file(lab_path)
    if images.ndim != 3:
        raise IdxFormatError(f"{img_path}: expected rank-3 images,"
                             f" got rank {images.ndim}")
    if labels.ndim != 1 or labels.shape[0] != images.shape[0]:
        raise IdxFormatError(f"{lab_path}: labels do not match images")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    flat = images.reshape(images.shape[0], -1).astype(float) / 255.0
    return Dataset(flat, one_hot(labels, 10), split=split)
