"""Labeled datasets: MNIST IDX ingestion, subsetting, label noise, confusion sets, blobs."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGES_MAGIC = 2051
LABELS_MAGIC = 2049
MNIST_IMAGES = "train-images-idx3-ubyte"
MNIST_LABELS = "train-labels-idx1-ubyte"


class IdxFormatError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    randomized: np.ndarray
    num_classes: int

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        randomized = np.asarray(self.randomized, dtype=bool)
        if inputs.ndim != 2:
            raise ValueError(f"inputs must be a (m, dim) array, got shape {inputs.shape}")
        if not len(inputs) == len(labels) == len(randomized):
            raise ValueError("inputs, labels and provenance flags differ in length")
        if len(labels) and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        for a in (inputs, labels, randomized):
            a.setflags(write=False)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "randomized", randomized)

    @classmethod
    def from_arrays(cls, inputs, labels, num_classes: int | None = None) -> "LabeledDataset":
        labels = np.asarray(labels, dtype=np.int64)
        if num_classes is None:
            num_classes = int(labels.max()) + 1 if len(labels) else 1
        return cls(inputs, labels, np.zeros(len(labels), dtype=bool), num_classes)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def take(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.inputs[idx], self.labels[idx], self.randomized[idx], self.num_classes)

    def true_part(self) -> "LabeledDataset":
        return self.take(np.flatnonzero(~self.randomized))

    def concat(self, other: "LabeledDataset") -> "LabeledDataset":
        if other.num_classes != self.num_classes or (len(other) and other.dim != self.dim):
            raise ValueError("datasets are not compatible")
        return LabeledDataset(
            np.concatenate([self.inputs, other.inputs]),
            np.concatenate([self.labels, other.labels]),
            np.concatenate([self.randomized, other.randomized]),
            self.num_classes,
        )

    def summary(self) -> dict:
        return {
            "m": len(self),
            "dim": self.dim,
            "num_classes": self.num_classes,
            "randomized": int(self.randomized.sum()),
            "label_counts": np.bincount(self.labels, minlength=self.num_classes).tolist(),
        }


def ceil_count(fraction: float, m: int) -> int:
    """``ceil(fraction * m)`` without float noise pushing exact products up by one."""
    return min(m, math.ceil(round(fraction * m, 9)))


def _read_header(raw: bytes, path, magic: int, ndim: int) -> tuple[int, ...]:
    need = 4 * (1 + ndim)
    if len(raw) < need:
        raise IdxFormatError(f"{path}: truncated header (file has {len(raw)} bytes, offset {len(raw)})")
    found = struct.unpack_from(">I", raw, 0)[0]
    if found != magic:
        raise IdxFormatError(f"{path}: bad magic {found} at offset 0, expected {magic}")
    return struct.unpack_from(f">{ndim}I", raw, 4)


def load_mnist_idx(images_path, labels_path, num_classes: int = 10) -> LabeledDataset:
    """Parse an uncompressed IDX image/label pair; pixels are scaled to [0, 1]."""
    img_raw = Path(images_path).read_bytes()
    lab_raw = Path(labels_path).read_bytes()
    n, rows, cols = _read_header(img_raw, images_path, IMAGES_MAGIC, 3)
    (n_labels,) = _read_header(lab_raw, labels_path, LABELS_MAGIC, 1)
    if n != n_labels:
        raise IdxFormatError(f"{labels_path}: {n_labels} labels at offset 4 but {images_path} holds {n} images")
    pixels = n * rows * cols
    if len(img_raw) < 16 + pixels:
        raise IdxFormatError(f"{images_path}: truncated pixel data at offset {len(img_raw)}, need {16 + pixels}")
    if len(lab_raw) < 8 + n:
        raise IdxFormatError(f"{labels_path}: truncated label data at offset {len(lab_raw)}, need {8 + n}")
    images = np.frombuffer(img_raw, dtype=np.uint8, count=pixels, offset=16).reshape(n, rows * cols)
    labels = np.frombuffer(lab_raw, dtype=np.uint8, count=n, offset=8).astype(np.int64)
    if n and labels.max() >= num_classes:
        bad = int(np.argmax(labels >= num_classes))
        raise IdxFormatError(f"{labels_path}: label {labels[bad]} at offset {8 + bad} exceeds {num_classes - 1}")
    return LabeledDataset(images / 255.0, labels, np.zeros(n, dtype=bool), num_classes)


def load_mnist_dir(data_dir) -> LabeledDataset:
    data_dir = Path(data_dir)
    return load_mnist_idx(data_dir / MNIST_IMAGES, data_dir / MNIST_LABELS)


def write_mnist_idx(data: LabeledDataset, images_path, labels_path, shape: tuple[int, int] | None = None) -> None:
    """Inverse of :func:`load_mnist_idx` for inputs on the 1/255 grid."""
    rows, cols = shape or (data.dim, 1)
    if rows * cols != data.dim:
        raise ValueError(f"shape {rows}x{cols} does not match input length {data.dim}")
    pixels = np.rint(data.inputs * 255.0)
    if pixels.min(initial=0) < 0 or pixels.max(initial=0) > 255:
        raise ValueError("inputs outside [0, 1] cannot be stored as IDX bytes")
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGES_MAGIC, len(data), rows, cols))
        f.write(pixels.astype(np.uint8).tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", LABELS_MAGIC, len(data)))
        f.write(data.labels.astype(np.uint8).tobytes())


def split(data: LabeledDataset, n: int, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    """Draw ``n`` samples without replacement; also return the remainder."""
    if not 0 <= n <= len(data):
        raise ValueError(f"cannot draw {n} samples from a dataset of {len(data)}")
    order = np.random.default_rng(seed).permutation(len(data))
    return data.take(order[:n]), data.take(np.sort(order[n:]))


def subsample(data: LabeledDataset, n: int, seed: int) -> LabeledDataset:
    return split(data, n, seed)[0]


def randomize_labels(data: LabeledDataset, fraction: float, seed: int) -> LabeledDataset:
    """Resample the labels of ``ceil(fraction * m)`` seed-chosen samples uniformly."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    m = len(data)
    k = ceil_count(fraction, m)
    rng = np.random.default_rng(seed)
    chosen = rng.permutation(m)[:k]
    labels = data.labels.copy()
    labels[chosen] = rng.integers(0, data.num_classes, size=k)
    flags = data.randomized.copy()
    flags[chosen] = True
    return LabeledDataset(data.inputs, labels, flags, data.num_classes)


def make_confusion_union(train: LabeledDataset, pool: LabeledDataset, size: int, seed: int) -> LabeledDataset:
    """``train`` followed by ``size`` pool samples carrying uniformly random labels.

    The caller guarantees ``pool`` is disjoint from ``train``.
    """
    if not 0 <= size <= len(pool):
        raise ValueError(f"confusion size {size} exceeds pool of {len(pool)}")
    confusion = subsample(pool, size, seed)
    confusion = randomize_labels(confusion, 1.0, seed + 1)
    return train.concat(confusion)


def synthetic_blobs(num_classes: int, per_class: int, dim: int, spread: float, seed: int) -> LabeledDataset:
    """Gaussian clusters around random unit-sphere centres, every input clipped to norm <= 1."""
    if min(num_classes, per_class, dim) < 1:
        raise ValueError("num_classes, per_class and dim must be >= 1")
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(num_classes, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    labels = np.repeat(np.arange(num_classes), per_class)
    x = centers[labels] + spread * rng.normal(size=(len(labels), dim))
    x /= np.maximum(1.0, np.linalg.norm(x, axis=1, keepdims=True))
    order = rng.permutation(len(labels))
    return LabeledDataset(x[order], labels[order], np.zeros(len(labels), dtype=bool), num_classes)
