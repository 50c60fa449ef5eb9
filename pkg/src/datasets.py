"""
Datasets: MNIST-style IDX files and synthetic Gaussian blobs.

Images are float arrays [N,C,H,W] in [0,1]; labels are int64 class ids.
"""

import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Literal, Optional, Tuple

import numpy as np

from errors import (
    DataError,
    EmptyDatasetError,
    IdxCountMismatchError,
    IdxMagicError,
    IdxTruncatedError,
    InfeasiblePackingError,
    ShapeError,
)

logger = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
MAX_PACKING_ATTEMPTS = 10_000


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: Literal["train", "test"] = "train"

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ShapeError(f"images must be [N,C,H,W], got {self.images.shape}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise ShapeError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.num_classes < 2:
            raise ShapeError(f"a dataset needs at least 2 classes, got {self.num_classes}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DataError("image values must lie in [0, 1]")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def sample_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, n: Optional[int]) -> "Dataset":
        """First n samples (all when n is None)."""
        if n is None or n >= len(self):
            return self
        return Dataset(self.images[:n], self.labels[:n], self.num_classes, self.split)

    def batches(self, m: int) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        for i in range(0, len(self), m):
            yield self.images[i:i + m], self.labels[i:i + m]

    def astype(self, dtype) -> "Dataset":
        return Dataset(self.images.astype(dtype, copy=False), self.labels, self.num_classes, self.split)


# ============================================================================
# IDX
# ============================================================================

def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as f:
            return f.read()
    return path.read_bytes()


def _parse_idx(raw: bytes, expected_magic: int, path) -> np.ndarray:
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxMagicError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise IdxTruncatedError(f"{path}: header ends early")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    count = int(np.prod(dims, dtype=np.int64))
    if len(raw) < header_len + count:
        raise IdxTruncatedError(f"{path}: expected {count} data bytes, found {len(raw) - header_len}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header_len).reshape(dims)


def load_idx(images_path, labels_path, split: Literal["train", "test"] = "train", num_classes: int = 10) -> Dataset:
    """Read an IDX image file (magic 2051) and label file (magic 2049); pixels scaled by 1/255."""
    pixels = _parse_idx(_read_bytes(images_path), IMAGE_MAGIC, images_path)
    labels = _parse_idx(_read_bytes(labels_path), LABEL_MAGIC, labels_path)
    if pixels.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(f"{images_path} has {pixels.shape[0]} images, {labels_path} has {labels.shape[0]} labels")
    images = (pixels.astype(np.float64) / 255.0)[:, None, :, :]
    logger.info(f"Loaded {images.shape[0]} {split} images of {images.shape[2]}x{images.shape[3]} from {images_path}")
    return Dataset(images, labels.astype(np.int64), num_classes, split)


def save_idx(dataset: Dataset, images_path, labels_path) -> None:
    """Write single-channel images (rounded to bytes) and labels as IDX; '.gz' paths are compressed."""
    if dataset.images.shape[1] != 1:
        raise ShapeError("IDX images must be single-channel")
    n, _, h, w = dataset.images.shape
    pixels = np.rint(dataset.images[:, 0] * 255.0).astype(">u1")
    _write_bytes(images_path, struct.pack(">IIII", IMAGE_MAGIC, n, h, w) + pixels.tobytes())
    _write_bytes(labels_path, struct.pack(">II", LABEL_MAGIC, n) + dataset.labels.astype(">u1").tobytes())


def _write_bytes(path, data: bytes) -> None:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "wb") as f:
            f.write(data)
    else:
        path.write_bytes(data)


# ============================================================================
# SYNTHETIC BLOBS
# ============================================================================

def _pack_centers(k: int, d: int, min_gap: float, margin: float, rng: np.random.Generator) -> np.ndarray:
    """Rejection-sample k centers in [margin, 1-margin]^d with pairwise distance >= min_gap."""
    low, high = margin, 1.0 - margin
    if high < low:
        raise InfeasiblePackingError(f"spread {margin / 3:.4g} leaves no room inside [0,1]")
    centers = []
    attempts = 0
    while len(centers) < k:
        attempts += 1
        if attempts > MAX_PACKING_ATTEMPTS:
            raise InfeasiblePackingError(f"could not place {k} centers {min_gap:.4g} apart in {d} dimensions")
        candidate = rng.uniform(low, high, size=d)
        if all(np.linalg.norm(candidate - c) >= min_gap for c in centers):
            centers.append(candidate)
    return np.array(centers)


def make_blobs(n_per_class: int, k: int, d: int, spread: float, rng: np.random.Generator) -> Dataset:
    """
    K isotropic Gaussian clusters in [0,1]^D, centers at least 6*spread apart.

    Noise is truncated at radius 3*spread, so every point lies strictly closer
    to its own center than to any other. Images have shape [N,1,1,D].
    """
    if k < 2 or d < 1:
        raise ShapeError(f"make_blobs needs K >= 2 and D >= 1, got K={k}, D={d}")
    if n_per_class < 0 or spread < 0:
        raise ShapeError("n_per_class and spread must be non-negative")
    centers = _pack_centers(k, d, 6.0 * spread, 3.0 * spread, rng)

    labels = np.repeat(np.arange(k), n_per_class)
    noise = rng.normal(0.0, spread, size=(labels.shape[0], d)) if spread > 0 else np.zeros((labels.shape[0], d))
    norms = np.linalg.norm(noise, axis=1, keepdims=True)
    limit = 3.0 * spread
    scale = np.where(norms > limit, limit / np.where(norms > 0, norms, 1.0), 1.0)
    points = np.clip(centers[labels] + noise * scale, 0.0, 1.0)
    order = rng.permutation(labels.shape[0])
    return Dataset(points[order, None, None, :], labels[order].astype(np.int64), k)


def require_nonempty(dataset: Dataset, what: str = "dataset") -> Dataset:
    if len(dataset) == 0:
        raise EmptyDatasetError(f"{what} is empty")
    return dataset
