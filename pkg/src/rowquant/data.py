"""Dataset readers/writers, synthetic data and deterministic batching.

All randomness comes from numpy's PCG64 generator seeded with explicit
integer tuples, which gives the same streams on every platform.
"""

from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

_IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {v.newbyteorder("="): k for k, v in _IDX_DTYPES.items()}


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int
    mean: Optional[np.ndarray] = field(default=None, repr=False)
    std: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.shape[0] != self.labels.shape[0]:
            raise DataFormatError("count mismatch between features and labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataFormatError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def sample_shape(self) -> tuple:
        return tuple(self.features.shape[1:])

    def subset(self, index) -> "Dataset":
        return Dataset(self.features[index], self.labels[index], self.class_count, self.mean, self.std)


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------

def read_idx(path) -> np.ndarray:
    """Parse any IDX file into a native-endian array."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise DataFormatError(f"{path}: truncated (no IDX header)")
    zero, code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or code not in _IDX_DTYPES:
        raise DataFormatError(f"{path}: bad magic number 0x{int.from_bytes(raw[:4], 'big'):08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    dtype = _IDX_DTYPES[code]
    need = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(raw) - header < need:
        raise DataFormatError(f"{path}: truncated payload ({len(raw) - header} of {need} bytes)")
    return np.frombuffer(raw, dtype=dtype, count=need // dtype.itemsize, offset=header).reshape(dims).astype(dtype.newbyteorder("="))


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    key = array.dtype.newbyteorder("=")
    if key not in _IDX_CODES:
        raise DataFormatError(f"dtype {array.dtype} has no IDX encoding")
    header = struct.pack(">HBB", 0, _IDX_CODES[key], array.ndim)
    header += struct.pack(f">{array.ndim}I", *array.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(array.astype(array.dtype.newbyteorder(">")).tobytes())


def _magic(path) -> int:
    with open(path, "rb") as fh:
        head = fh.read(4)
    if len(head) < 4:
        raise DataFormatError(f"{path}: truncated (no IDX header)")
    return int.from_bytes(head, "big")


def load_idx(images_path, labels_path, class_count: Optional[int] = None) -> Dataset:
    """MNIST-style image/label pair; pixels scaled to [0, 1], channel axis added."""
    for path, want in ((images_path, IDX_IMAGES_MAGIC), (labels_path, IDX_LABELS_MAGIC)):
        got = _magic(path)
        if got != want:
            raise DataFormatError(f"{path}: bad magic number 0x{got:08x}, expected 0x{want:08x}")
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels")
    feats = images.astype(np.float64) / 255.0
    feats = feats.reshape(feats.shape[0], 1, *feats.shape[1:])
    k = class_count if class_count is not None else (int(labels.max()) + 1 if labels.size else 0)
    return Dataset(feats, labels.astype(np.int64), k)


def save_idx(dataset: Dataset, images_path, labels_path) -> None:
    """Write image features in [0, 1] back as 8-bit IDX."""
    feats = dataset.features
    if feats.ndim == 4 and feats.shape[1] == 1:
        feats = feats[:, 0]
    pixels = np.clip(np.rint(feats * 255.0), 0, 255).astype(np.uint8)
    write_idx(images_path, pixels)
    write_idx(labels_path, dataset.labels.astype(np.uint8))


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def load_csv(path, class_count: Optional[int] = None) -> Dataset:
    """CSV with header ``label,f0,f1,...``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "label":
            raise DataFormatError(f"{path}: header must start with 'label'")
        rows = [r for r in reader if r]
    labels = np.array([int(r[0]) for r in rows], dtype=np.int64)
    feats = np.array([[float(v) for v in r[1:]] for r in rows], dtype=np.float64).reshape(len(rows), len(header) - 1)
    k = class_count if class_count is not None else (int(labels.max()) + 1 if labels.size else 0)
    return Dataset(feats, labels, k)


def save_csv(dataset: Dataset, path) -> None:
    flat = dataset.features.reshape(len(dataset), -1)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"] + [f"f{i}" for i in range(flat.shape[1])])
        for label, row in zip(dataset.labels, flat):
            writer.writerow([int(label)] + [repr(float(v)) for v in row])


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def synth_gaussians(classes: int, dims: int, n_per_class: int, seed: int = 0, sigma: float = 1.0) -> Dataset:
    """Isotropic Gaussian blobs; class c is centred at 4σ·c in every coordinate."""
    if classes < 2:
        raise ValueError("need at least 2 classes")
    rng = np.random.default_rng([seed, classes, dims, n_per_class])
    means = 4.0 * sigma * np.arange(classes, dtype=np.float64)[:, None] * np.ones((1, dims))
    feats = np.concatenate([means[c] + sigma * rng.standard_normal((n_per_class, dims)) for c in range(classes)])
    labels = np.repeat(np.arange(classes), n_per_class)
    return Dataset(feats.reshape(classes * n_per_class, dims), labels, classes)


# ---------------------------------------------------------------------------
# normalization, splitting and batching
# ---------------------------------------------------------------------------

def fit_normalization(dataset: Dataset):
    """Per-feature mean and std (std floored at 1e-8)."""
    if len(dataset) == 0:
        shape = dataset.sample_shape
        return np.zeros(shape), np.ones(shape)
    mean = dataset.features.mean(axis=0)
    std = np.maximum(dataset.features.std(axis=0), 1e-8)
    return mean, std


def normalize(dataset: Dataset, mean: np.ndarray, std: np.ndarray) -> Dataset:
    return Dataset((dataset.features - mean) / std, dataset.labels, dataset.class_count, mean, std)


def train_val_split(dataset: Dataset, val_fraction: float = 0.2, seed: int = 0):
    perm = np.random.default_rng([seed, 0x5EED]).permutation(len(dataset))
    n_val = int(round(len(dataset) * val_fraction))
    return dataset.subset(np.sort(perm[n_val:])), dataset.subset(np.sort(perm[:n_val]))


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batches(dataset: Dataset, batch_size: int, seed: int = 0, epoch: int = 0, shuffle: bool = True) -> Iterator:
    """Yield (features, labels) minibatches in a seeded per-epoch order."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    order = epoch_permutation(n, seed, epoch) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield dataset.features[idx], dataset.labels[idx]


def calibration_batch(dataset: Dataset, size: int = 128, seed: int = 0):
    """Fixed seeded batch for Hessian and clip calibration (whole set if smaller)."""
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot draw a calibration batch from an empty dataset")
    idx = np.sort(np.random.default_rng([seed, 0xCA11B]).permutation(n)[: min(size, n)])
    return dataset.features[idx], dataset.labels[idx]


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def load_idx_dir(path):
    """(train, test) from a directory holding MNIST-named IDX files."""
    out = []
    for part in ("train", "test"):
        img, lab = (os.path.join(path, name) for name in MNIST_FILES[part])
        out.append(load_idx(img, lab, class_count=None))
    k = max(out[0].class_count, out[1].class_count)
    return tuple(Dataset(d.features, d.labels, k) for d in out)
