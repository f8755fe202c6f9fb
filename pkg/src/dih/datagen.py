"""Deterministic synthetic classification data and its on-disk format."""

from __future__ import annotations

import csv
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from dih.errors import (ArtifactNotFoundError, ChecksumMismatchError, ContractError,
                        MalformedHeaderError)

SPLITS = ("train", "test")
TRAIN_FRACTION = 0.8


@dataclass(frozen=True, eq=False)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)
        if inputs.ndim != 2 or labels.shape != (inputs.shape[0],) or inputs.shape[0] == 0:
            raise ContractError(f"need n > 0 rows with one label each, got {inputs.shape} / {labels.shape}")
        if self.num_classes < 2 or labels.min() < 0 or labels.max() >= self.num_classes:
            raise ContractError(f"labels must lie in [0, {self.num_classes})")
        if self.split not in SPLITS:
            raise ContractError(f"split must be one of {SPLITS}, got {self.split!r}")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def same_as(self, other: Dataset) -> bool:
        return (self.num_classes == other.num_classes and self.split == other.split
                and self.inputs.shape == other.inputs.shape
                and self.inputs.tobytes() == other.inputs.tobytes()
                and self.labels.tobytes() == other.labels.tobytes())


def _split_and_standardize(points: list[np.ndarray], num_classes: int,
                           rng: np.random.Generator) -> tuple[Dataset, Dataset]:
    """Per-class 80/20 split, shuffle, then standardize with train moments."""
    per_class = points[0].shape[0]
    n_train = min(per_class - 1, max(1, int(round(TRAIN_FRACTION * per_class))))
    tr_x, tr_y, te_x, te_y = [], [], [], []
    for c, pts in enumerate(points):
        order = rng.permutation(per_class)
        tr_x.append(pts[order[:n_train]])
        te_x.append(pts[order[n_train:]])
        tr_y.append(np.full(n_train, c))
        te_y.append(np.full(per_class - n_train, c))
    tr_x, tr_y = np.concatenate(tr_x), np.concatenate(tr_y)
    te_x, te_y = np.concatenate(te_x), np.concatenate(te_y)
    p_tr, p_te = rng.permutation(len(tr_y)), rng.permutation(len(te_y))
    tr_x, tr_y, te_x, te_y = tr_x[p_tr], tr_y[p_tr], te_x[p_te], te_y[p_te]

    mean = tr_x.mean(axis=0)
    std = tr_x.std(axis=0)
    std[std == 0] = 1.0
    train = Dataset((tr_x - mean) / std, tr_y, num_classes, "train")
    test = Dataset((te_x - mean) / std, te_y, num_classes, "test")
    return train, test


def blob_centers(num_classes: int, dim: int, spread: float) -> np.ndarray:
    """Scaled basis vectors when they fit, otherwise points on a circle."""
    centers = np.zeros((num_classes, dim))
    if num_classes <= dim:
        centers[np.arange(num_classes), np.arange(num_classes)] = spread
    else:
        angles = 2 * np.pi * np.arange(num_classes) / num_classes
        centers[:, 0] = spread * np.cos(angles)
        centers[:, 1] = spread * np.sin(angles)
    return centers


def make_blobs(num_classes: int, per_class: int, dim: int, spread: float, seed: int) -> tuple[Dataset, Dataset]:
    """Unit-variance Gaussian clusters around deterministic centers."""
    if num_classes < 2 or dim < 2:
        raise ContractError("blobs need at least 2 classes and 2 dimensions")
    if per_class < 2 or spread <= 0:
        raise ContractError("blobs need per_class >= 2 and a positive spread")
    rng = np.random.default_rng(seed)
    centers = blob_centers(num_classes, dim, spread)
    points = [centers[c] + rng.standard_normal((per_class, dim)) for c in range(num_classes)]
    return _split_and_standardize(points, num_classes, rng)


def make_spirals(num_classes: int, per_class: int, noise: float, seed: int,
                 turns: float = 1.0) -> tuple[Dataset, Dataset]:
    """Interleaved 2-d spiral arms, one per class, with Gaussian jitter.

    Arm ``c`` follows radius ``t`` and angle ``2*pi*(c/C + turns*t)`` for
    ``t`` evenly spaced in ``[0.05, 1]``; the noise is added to both
    coordinates.
    """
    if num_classes < 2 or per_class < 2 or noise < 0:
        raise ContractError("spirals need at least 2 classes, per_class >= 2 and noise >= 0")
    rng = np.random.default_rng(seed)
    t = np.linspace(0.05, 1.0, per_class)
    points = []
    for c in range(num_classes):
        angle = 2 * np.pi * (c / num_classes + turns * t)
        arm = np.stack([t * np.cos(angle), t * np.sin(angle)], axis=1)
        points.append(arm + noise * rng.standard_normal(arm.shape))
    return _split_and_standardize(points, num_classes, rng)


# -- persistence ------------------------------------------------------------------

# magic, version, C, n, d, split code; then n*d '<f8' inputs, n '<i8' labels, crc32
MAGIC = b"DIHDATA\0"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIIQQB")


def dataset_to_bytes(ds: Dataset) -> bytes:
    n, d = ds.inputs.shape
    body = bytearray(_HEADER.pack(MAGIC, FORMAT_VERSION, ds.num_classes, n, d, SPLITS.index(ds.split)))
    body += ds.inputs.astype("<f8").tobytes()
    body += ds.labels.astype("<i8").tobytes()
    body += struct.pack("<I", zlib.crc32(body))
    return bytes(body)


def dataset_from_bytes(blob: bytes) -> Dataset:
    if len(blob) < _HEADER.size:
        raise MalformedHeaderError("dataset file is truncated before the end of its header")
    magic, version, num_classes, n, d, split = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise MalformedHeaderError(f"bad magic bytes {magic!r}")
    if version != FORMAT_VERSION:
        raise MalformedHeaderError(f"unsupported dataset version {version}")
    if split >= len(SPLITS):
        raise MalformedHeaderError(f"unknown split code {split}")
    if len(blob) != _HEADER.size + 8 * n * d + 8 * n + 4:
        raise MalformedHeaderError("dataset file length does not match its header (truncated?)")
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if crc != zlib.crc32(blob[:-4]):
        raise ChecksumMismatchError("dataset checksum mismatch")
    off = _HEADER.size
    inputs = np.frombuffer(blob, "<f8", n * d, off).reshape(n, d)
    labels = np.frombuffer(blob, "<i8", n, off + 8 * n * d)
    return Dataset(inputs.astype(np.float64), labels.astype(np.int64), num_classes, SPLITS[split])


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_bytes(dataset_to_bytes(ds))


def load_dataset(path) -> Dataset:
    path = Path(path)
    if not path.is_file():
        raise ArtifactNotFoundError(f"no such dataset file: {path}")
    return dataset_from_bytes(path.read_bytes())


def export_csv(ds: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x_{j}" for j in range(ds.dim)] + ["label"])
        for row, label in zip(ds.inputs, ds.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])
