"""Dataset ingestion, preprocessing and a synthetic toy task."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import DimensionError, RngStream


class IngestionError(IOError):
    """A dataset file is missing or malformed."""


class FormatError(ValueError):
    """A persisted artifact has the wrong magic, version or length."""


@dataclass
class Dataset:
    images: np.ndarray  # (count, c, m, n) float64
    labels: np.ndarray  # (count,) int64
    classes: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DimensionError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError(f"labels outside [0, {self.classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def take(self, index, split: str | None = None) -> "Dataset":
        return Dataset(self.images[index], self.labels[index], self.classes, split or self.split)

    def batches(self, batch_size: int, rng: RngStream | None = None):
        """Yield ``(images, labels)`` minibatches, shuffled when ``rng`` is given."""
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start : start + batch_size]
            yield self.images[idx], self.labels[idx]


def split_validation(data: Dataset, count: int = 5000) -> tuple[Dataset, Dataset]:
    """Reserve the last ``count`` samples of ``data`` for validation."""
    if not 0 < count < len(data):
        raise ValueError(f"cannot hold out {count} of {len(data)} samples")
    cut = len(data) - count
    return data.take(slice(0, cut), "train"), data.take(slice(cut, None), "val")


def subset(data: Dataset, count: int, rng: RngStream) -> Dataset:
    """Random subset of ``count`` samples, deterministic per stream."""
    if count > len(data):
        raise ValueError(f"subset of {count} from {len(data)} samples")
    idx = np.sort(rng.permutation(len(data))[:count])
    return data.take(idx)


# --------------------------------------------------------------------------
# CIFAR binary format

_CIFAR = {
    # variant: (label bytes, label byte used, classes per label byte, train files, test files)
    "cifar10": (1, 0, (10,), [f"data_batch_{i}.bin" for i in range(1, 6)], ["test_batch.bin"]),
    "cifar100": (2, 1, (20, 100), ["train.bin"], ["test.bin"]),
}
_PIXELS = 3072
_EXPECTED = {"train": 50000, "test": 10000}


def read_cifar_file(path, variant: str = "cifar10") -> tuple[np.ndarray, np.ndarray]:
    """Parse one CIFAR binary batch file.

    Returns images of shape ``(count, 3, 32, 32)`` scaled to [0, 1] and the
    labels (fine labels for CIFAR-100).
    """
    if variant not in _CIFAR:
        raise ValueError(f"unknown CIFAR variant {variant!r}")
    nlab, used, ranges, _, _ = _CIFAR[variant]
    record = nlab + _PIXELS
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"{path}: file not found")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % record:
        offset = (raw.size // record) * record
        raise IngestionError(
            f"{path}: truncated record at byte offset {offset} "
            f"({raw.size - offset} of {record} bytes)"
        )
    recs = raw.reshape(-1, record)
    for j, limit in enumerate(ranges):
        bad = np.flatnonzero(recs[:, j] >= limit)
        if bad.size:
            raise IngestionError(
                f"{path}: label byte {recs[bad[0], j]} out of range at byte offset "
                f"{bad[0] * record + j}"
            )
    labels = recs[:, used].astype(np.int64)
    images = recs[:, nlab:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return images, labels


def load_cifar(path, variant: str = "cifar10", split: str = "train", check_count: bool = True) -> Dataset:
    """Load the train or test split of CIFAR-10/100 from its binary distribution."""
    if variant not in _CIFAR:
        raise ValueError(f"unknown CIFAR variant {variant!r}")
    root = Path(path)
    if not root.is_dir():
        raise IngestionError(f"{root}: not a directory")
    nested = {"cifar10": "cifar-10-batches-bin", "cifar100": "cifar-100-binary"}[variant]
    if (root / nested).is_dir():
        root = root / nested
    _, _, ranges, train_files, test_files = _CIFAR[variant]
    files = train_files if split == "train" else test_files
    parts = [read_cifar_file(root / f, variant) for f in files]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    if check_count and len(labels) != _EXPECTED[split]:
        raise IngestionError(
            f"{root}: expected {_EXPECTED[split]} {split} records, found {len(labels)}"
        )
    return Dataset(images, labels, ranges[-1], split)


# --------------------------------------------------------------------------
# Toy task


def make_toy_dataset(
    rng: RngStream,
    count: int,
    classes: int,
    size: int = 16,
    channels: int = 1,
    noise: float = 0.35,
) -> Dataset:
    """Oriented-bar images, one orientation per class.

    Each image holds a short bar at a random position with random polarity
    (brighter or darker than the background) on Gaussian noise. Random
    polarity and position leave class means nearly identical, so a linear
    classifier does poorly while a small maxout CNN separates the classes.
    Classes are balanced up to ``count % classes``.
    """
    if count < classes:
        raise ValueError("count must be >= classes")
    labels = np.arange(count) % classes
    labels = labels[rng.permutation(count)]
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    half = size / 4.0
    images = np.empty((count, channels, size, size))
    cy = rng.uniform(half, size - 1 - half, count)
    cx = rng.uniform(half, size - 1 - half, count)
    polarity = np.where(rng.uniform(size=count) < 0.5, -1.0, 1.0)
    tint = rng.uniform(0.5, 1.0, (count, channels))
    jitter = rng.uniform(-0.5, 0.5, count) * (np.pi / classes) * 0.5
    noise_img = rng.normal((count, channels, size, size)) * noise
    for i in range(count):
        angle = np.pi * labels[i] / classes + jitter[i]
        dy, dx = ys - cy[i], xs - cx[i]
        along = dx * np.cos(angle) + dy * np.sin(angle)
        across = -dx * np.sin(angle) + dy * np.cos(angle)
        bar = np.exp(-0.5 * (across / 0.7) ** 2) * (np.abs(along) <= half)
        images[i] = polarity[i] * tint[i][:, None, None] * bar
    images += noise_img
    return Dataset(images, labels, classes)


# --------------------------------------------------------------------------
# Preprocessing


def global_contrast_normalize(images: np.ndarray, epsilon: float = 1e-8, scale: float = 1.0) -> np.ndarray:
    """Per image: subtract the mean, divide by ``max(L2 norm, epsilon)``, multiply by ``scale``."""
    x = np.asarray(images, dtype=np.float64)
    flat = x.reshape(len(x), -1)
    centered = flat - flat.mean(axis=1, keepdims=True)
    norms = np.sqrt(np.sum(centered**2, axis=1, keepdims=True))
    out = scale * centered / np.maximum(norms, epsilon)
    return out.reshape(x.shape)


@dataclass
class ZcaTransform:
    mean: np.ndarray
    matrix: np.ndarray
    epsilon: float = 1e-2
    shape: tuple = field(default=None)

    @property
    def dims(self) -> int:
        return len(self.mean)


def fit_zca(train_images: np.ndarray, epsilon: float = 1e-2) -> ZcaTransform:
    """Fit a ZCA whitening transform ``E diag(1/sqrt(lambda + eps)) E^T``."""
    x = np.asarray(train_images, dtype=np.float64)
    if len(x) < 2:
        raise ValueError("ZCA needs at least two images")
    flat = x.reshape(len(x), -1)
    mean = flat.mean(axis=0)
    centered = flat - mean
    cov = centered.T @ centered / len(flat)
    evals, evecs = np.linalg.eigh(cov)
    evals = np.clip(evals, 0.0, None)
    w = (evecs * (1.0 / np.sqrt(evals + epsilon))) @ evecs.T
    w = 0.5 * (w + w.T)
    return ZcaTransform(mean, w, float(epsilon), tuple(x.shape[1:]))


def apply_zca(t: ZcaTransform, images: np.ndarray) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    flat = x.reshape(len(x), -1)
    if flat.shape[1] != t.dims:
        raise DimensionError(f"images have {flat.shape[1]} dims, transform has {t.dims}")
    return ((flat - t.mean) @ t.matrix.T).reshape(x.shape)


_ZCA_MAGIC = b"ZCA1"


def save_zca(t: ZcaTransform, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_ZCA_MAGIC)
        fh.write(struct.pack("<Qd", t.dims, t.epsilon))
        fh.write(np.ascontiguousarray(t.mean, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(t.matrix, dtype="<f8").tobytes())


def load_zca(path) -> ZcaTransform:
    blob = Path(path).read_bytes()
    if blob[:4] != _ZCA_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 20:
        raise FormatError(f"{path}: truncated header")
    dims, eps = struct.unpack_from("<Qd", blob, 4)
    need = 20 + 8 * (dims + dims * dims)
    if len(blob) != need:
        raise FormatError(f"{path}: expected {need} bytes, found {len(blob)}")
    body = np.frombuffer(blob, dtype="<f8", offset=20).astype(np.float64)
    return ZcaTransform(body[:dims].copy(), body[dims:].reshape(dims, dims).copy(), eps)


# --------------------------------------------------------------------------
# Prepared dataset directories


def save_dataset(data: Dataset, directory, name: str) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np.save(directory / f"{name}_images.npy", data.images)
    np.save(directory / f"{name}_labels.npy", data.labels)


def load_dataset(directory, name: str, classes: int) -> Dataset:
    directory = Path(directory)
    img = directory / f"{name}_images.npy"
    lab = directory / f"{name}_labels.npy"
    for f in (img, lab):
        if not f.is_file():
            raise IngestionError(f"{f}: file not found")
    return Dataset(np.load(img), np.load(lab), classes, name)


def cifar_dir_from_env(variant: str = "cifar10") -> str | None:
    """Location of a local CIFAR copy from ``DASNET_CIFAR10_DIR``/``DASNET_CIFAR100_DIR``."""
    value = os.environ.get(f"DASNET_{variant.upper()}_DIR")
    return value if value and Path(value).is_dir() else None
