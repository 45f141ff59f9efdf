"""Dataset ingestion, normalization and deterministic splitting.

Supported on-disk formats are the IDX container (MNIST family) and the
CIFAR-10 binary record layout, both read bit-exactly per their public
layouts; downloading is out of scope, paths come from the caller. For
self-contained desk-scale runs there is also the bundled 8x8 handwritten
digits set shipped with scikit-learn, which needs no network access.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import InputError

_IDX_DTYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4",
               0x0D: ">f4", 0x0E: ">f8"}


@dataclass(frozen=True)
class Dataset:
    """Immutable image/label batch with its normalization recorded."""

    images: np.ndarray  # (N, C, H, W) float64, values within pixel_range
    labels: np.ndarray  # (N,) int64
    pixel_range: tuple[float, float]
    num_classes: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise InputError("images/labels length mismatch")
        if len(self.labels) and (self.labels.min() < 0
                                 or self.labels.max() >= self.num_classes):
            raise InputError("label outside [0, num_classes)")
        lo, hi = self.pixel_range
        if self.images.size and (self.images.min() < lo - 1e-9
                                 or self.images.max() > hi + 1e-9):
            raise InputError("pixel values outside the declared range")

    def __len__(self):
        return len(self.labels)

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices)
        return replace(self, images=self.images[idx], labels=self.labels[idx])


def read_idx(path) -> np.ndarray:
    """Read one IDX file into an array; errors report the byte offset."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise InputError(f"{path}: truncated magic at byte {len(raw)}")
    zero1, zero2, code, ndim = struct.unpack(">BBBB", raw[:4])
    if zero1 or zero2 or code not in _IDX_DTYPES:
        raise InputError(f"{path}: bad magic number at byte 0")
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise InputError(f"{path}: truncated header at byte {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    dtype = np.dtype(_IDX_DTYPES[code])
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    expected = header_end + count * dtype.itemsize
    if len(raw) < expected:
        raise InputError(f"{path}: truncated data at byte {len(raw)}, "
                         f"expected {expected} bytes")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=header_end)
    return data.reshape(dims).astype(dtype.newbyteorder("="))


def write_idx(path, array: np.ndarray) -> None:
    """Write an unsigned-byte array in IDX layout (fixtures and exports)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">BBBB", 0, 0, 0x08, array.ndim))
        for d in array.shape:
            fh.write(struct.pack(">I", d))
        fh.write(array.tobytes())


def _scale_pixels(raw: np.ndarray, source_max: float,
                  pixel_range: tuple[float, float]) -> np.ndarray:
    lo, hi = pixel_range
    return raw.astype(np.float64) / source_max * (hi - lo) + lo


def load_idx(images_path, labels_path,
             pixel_range: tuple[float, float] = (0.0, 1.0)) -> Dataset:
    """Load an IDX image/label file pair; 8-bit pixels are mapped affinely
    onto the requested normalization range."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim == 3:
        images = images[:, None]
    if images.ndim != 4:
        raise InputError(f"{images_path}: expected 3- or 4-d image data")
    if labels.ndim != 1 or len(labels) != len(images):
        raise InputError("label file does not match image file")
    labels = labels.astype(np.int64)
    classes = int(labels.max()) + 1 if len(labels) else 0
    return Dataset(images=_scale_pixels(images, 255.0, pixel_range),
                   labels=labels, pixel_range=pixel_range, num_classes=classes)


CIFAR_RECORD = 1 + 3 * 32 * 32


def load_cifar_binary(path, pixel_range: tuple[float, float] = (0.0, 1.0),
                      num_classes: int = 10) -> Dataset:
    """Load a CIFAR-10 binary batch: each record is one label byte followed
    by 3072 pixel bytes (three 32x32 channel planes)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) % CIFAR_RECORD:
        raise InputError(f"{path}: size {len(raw)} is not a multiple of "
                         f"{CIFAR_RECORD}-byte records")
    n = len(raw) // CIFAR_RECORD
    recs = np.frombuffer(raw, dtype=np.uint8).reshape(n, CIFAR_RECORD)
    labels = recs[:, 0].astype(np.int64)
    if len(labels) and labels.max() >= num_classes:
        raise InputError(f"{path}: label {labels.max()} outside "
                         f"[0, {num_classes})")
    images = recs[:, 1:].reshape(n, 3, 32, 32)
    return Dataset(images=_scale_pixels(images, 255.0, pixel_range),
                   labels=labels, pixel_range=pixel_range,
                   num_classes=num_classes)


def renormalize(ds: Dataset, target: tuple[float, float]) -> Dataset:
    """Affine remap onto a new range; round-trips within 1e-12."""
    lo, hi = ds.pixel_range
    tlo, thi = target
    scale = (thi - tlo) / (hi - lo)
    images = (ds.images - lo) * scale + tlo
    return Dataset(images=images, labels=ds.labels,
                   pixel_range=(float(tlo), float(thi)),
                   num_classes=ds.num_classes)


def split(ds: Dataset, n_train: int, n_test: int, seed: int):
    """Deterministic disjoint train/test split."""
    if n_train + n_test > len(ds):
        raise InputError(f"split {n_train}+{n_test} exceeds {len(ds)} samples")
    perm = np.random.default_rng(seed).permutation(len(ds))
    return ds.subset(perm[:n_train]), ds.subset(perm[n_train:n_train + n_test])


def digits_dataset(pixel_range: tuple[float, float] = (0.0, 1.0)) -> Dataset:
    """Bundled 8x8 handwritten digits (1797 samples, 10 classes), the
    desk-scale stand-in used by the built-in experiments."""
    from sklearn.datasets import load_digits

    raw = load_digits()
    images = raw.images[:, None]  # (N, 1, 8, 8), values 0..16
    return Dataset(images=_scale_pixels(images, 16.0, pixel_range),
                   labels=raw.target.astype(np.int64),
                   pixel_range=pixel_range, num_classes=10)
