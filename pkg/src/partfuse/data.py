"""Dataset ingestion (IDX format), heterogeneous splits, synthetic blobs."""

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .netcore import LabeledDataset

DATA_DIR_ENV = "PARTFUSE_DATA_DIR"
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


class DataFormatError(ValueError):
    """Raised for malformed IDX payloads; names what went wrong."""


def _open_maybe_gzip(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(fh, count: int, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise DataFormatError(f"truncated payload while reading {what}")
    return data


def _read_idx(path, expected_magic: int, what: str) -> np.ndarray:
    with _open_maybe_gzip(path) as fh:
        (magic,) = struct.unpack(">I", _read_exact(fh, 4, f"{what} magic"))
        if magic != expected_magic:
            raise DataFormatError(
                f"bad {what} magic 0x{magic:08x}, expected 0x{expected_magic:08x}"
            )
        ndim = magic & 0xFF
        dims = struct.unpack(f">{ndim}I", _read_exact(fh, 4 * ndim, f"{what} dims"))
        payload = _read_exact(fh, int(np.prod(dims)), f"{what} payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path) -> LabeledDataset:
    """Parse an IDX image/label pair; pixels scale to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, "images")
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, "labels")
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(
            f"image count {images.shape[0]} != label count {labels.shape[0]}"
        )
    flat = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return LabeledDataset(flat, labels.astype(np.int64))


def write_idx_images(path, images: np.ndarray) -> None:
    """Write uint8 images (N, rows, cols) as an IDX file; used for fixtures."""
    images = np.asarray(images, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", IDX_IMAGES_MAGIC))
        fh.write(struct.pack(">3I", *images.shape))
        fh.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", IDX_LABELS_MAGIC))
        fh.write(struct.pack(">I", labels.shape[0]))
        fh.write(labels.tobytes())


def data_dir() -> Optional[Path]:
    value = os.environ.get(DATA_DIR_ENV)
    return Path(value) if value else None


def find_mnist(directory: Optional[Path] = None) -> Optional[dict]:
    """Locate the four MNIST IDX files (optionally gzipped) or return None."""
    directory = directory or data_dir()
    if directory is None or not Path(directory).is_dir():
        return None
    found = {}
    for key, name in MNIST_FILES.items():
        for candidate in (Path(directory) / name, Path(directory) / (name + ".gz")):
            if candidate.is_file():
                found[key] = candidate
                break
        else:
            return None
    return found


@dataclass(frozen=True)
class SplitSpec:
    """Heterogeneous split: one specialist digit plus a minority share of the rest."""

    special_digit: int
    minority_fraction: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if self.special_digit < 0:
            raise ValueError("special_digit must be a valid class index")
        if not 0.0 < self.minority_fraction < 1.0:
            raise ValueError("minority_fraction must lie in (0, 1)")


def _take(data: LabeledDataset, idx: np.ndarray) -> LabeledDataset:
    return LabeledDataset(data.inputs[idx], data.labels[idx])


def heterogeneous_split(
    data: LabeledDataset, spec: SplitSpec
) -> Tuple[LabeledDataset, LabeledDataset]:
    """Split A gets every specialist sample plus a seeded per-class minority.

    Split B is the exact complement, so the two splits partition the data
    and B contains no specialist samples at all.
    """
    classes = np.unique(data.labels)
    if spec.special_digit not in classes:
        raise ValueError(f"class {spec.special_digit} not present in the data")
    rng = np.random.default_rng(spec.seed)
    in_a = np.zeros(len(data), dtype=bool)
    for c in classes:
        members = np.flatnonzero(data.labels == c)
        if members.size == 0:
            raise ValueError(f"class {c} is empty")
        if c == spec.special_digit:
            in_a[members] = True
        else:
            k = int(round(spec.minority_fraction * members.size))
            chosen = rng.choice(members, size=k, replace=False)
            in_a[chosen] = True
    return _take(data, np.flatnonzero(in_a)), _take(data, np.flatnonzero(~in_a))


def holdout(
    data: LabeledDataset, fraction: float, seed: int = 0, stratified: bool = True
) -> Tuple[LabeledDataset, LabeledDataset]:
    """Seeded split into (rest, held); stratified per class by default."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    held_mask = np.zeros(len(data), dtype=bool)
    if stratified:
        for c in np.unique(data.labels):
            members = np.flatnonzero(data.labels == c)
            k = int(round(fraction * members.size))
            chosen = rng.choice(members, size=k, replace=False)
            held_mask[chosen] = True
    else:
        k = int(round(fraction * len(data)))
        held_mask[rng.choice(len(data), size=k, replace=False)] = True
    return _take(data, np.flatnonzero(~held_mask)), _take(data, np.flatnonzero(held_mask))


def synthetic_blobs(
    n_classes: int, per_class: int, dim: int, spread: float, seed: int = 0
) -> LabeledDataset:
    """Seeded Gaussian clusters with class means at least 4 * spread apart."""
    if n_classes < 1 or per_class < 1 or dim < 1:
        raise ValueError("sizes must be positive")
    rng = np.random.default_rng(seed)
    means = np.zeros((n_classes, dim))
    for c in range(1, n_classes):
        axis = c % dim
        means[c, axis] = 4.0 * spread * (1 + (c - 1) // dim + c / n_classes)
    inputs = np.vstack(
        [means[c] + spread * rng.standard_normal((per_class, dim)) for c in range(n_classes)]
    )
    labels = np.repeat(np.arange(n_classes), per_class)
    order = rng.permutation(len(labels))
    return LabeledDataset(inputs[order], labels[order])
