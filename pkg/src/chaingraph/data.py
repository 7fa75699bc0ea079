"""Datasets: IDX (MNIST family) files, soft clamping, splits, synthetic sets."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IDXFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    """Inputs as expected features ``q^1`` (rows of ``X``) with integer labels."""

    X: np.ndarray
    y: np.ndarray
    n_classes: int

    def __post_init__(self):
        if len(self.X) != len(self.y):
            raise ValueError("inputs and labels differ in length")
        if len(self.y) and (self.y.max() >= self.n_classes or self.y.min() < 0):
            raise ValueError("label outside 0..n_classes-1")

    def __len__(self):
        return len(self.y)

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx], self.n_classes)


def _read(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def parse_idx_images(buf: bytes) -> np.ndarray:
    if len(buf) < 16:
        raise IDXFormatError(f"image file truncated in header at byte offset {len(buf)}")
    magic, n, rows, cols = struct.unpack(">IIII", buf[:16])
    if magic != IMAGE_MAGIC:
        raise IDXFormatError(f"bad image magic 0x{magic:08x} at byte offset 0")
    need = 16 + n * rows * cols
    if len(buf) < need:
        raise IDXFormatError(f"image file truncated at byte offset {len(buf)}, expected {need} bytes")
    return np.frombuffer(buf, dtype=np.uint8, count=n * rows * cols, offset=16).reshape(n, rows, cols)


def parse_idx_labels(buf: bytes) -> np.ndarray:
    if len(buf) < 8:
        raise IDXFormatError(f"label file truncated in header at byte offset {len(buf)}")
    magic, n = struct.unpack(">II", buf[:8])
    if magic != LABEL_MAGIC:
        raise IDXFormatError(f"bad label magic 0x{magic:08x} at byte offset 0")
    if len(buf) < 8 + n:
        raise IDXFormatError(f"label file truncated at byte offset {len(buf)}, expected {8 + n} bytes")
    return np.frombuffer(buf, dtype=np.uint8, count=n, offset=8)


def load_idx(images_path, labels_path):
    """Raw ``(images uint8 (n, rows, cols), labels uint8 (n,))``; ``.gz`` is read transparently."""
    images = parse_idx_images(_read(images_path))
    labels = parse_idx_labels(_read(labels_path))
    if len(images) != len(labels):
        raise IDXFormatError(f"count mismatch at byte offset 4: {len(images)} images, {len(labels)} labels")
    return images, labels


def idx_image_bytes(images: np.ndarray) -> bytes:
    n, rows, cols = images.shape
    return struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols) + np.ascontiguousarray(images, dtype=np.uint8).tobytes()


def idx_label_bytes(labels: np.ndarray) -> bytes:
    return struct.pack(">II", LABEL_MAGIC, len(labels)) + np.ascontiguousarray(labels, dtype=np.uint8).tobytes()


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path):
    for path, payload in ((images_path, idx_image_bytes(images)), (labels_path, idx_label_bytes(labels))):
        path = Path(path)
        opener = gzip.open if path.suffix == ".gz" else open
        with opener(path, "wb") as f:
            f.write(payload)


def soft_clamp(pixels) -> np.ndarray:
    """Pixel intensities as expected features of ``{0, 1}`` binary input nodes."""
    return np.asarray(pixels, dtype=float) / 255.0


def load_idx_dataset(images_path, labels_path, limit=None, n_classes=10) -> Dataset:
    images, labels = load_idx(images_path, labels_path)
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    X = soft_clamp(images.reshape(len(images), -1))
    return Dataset(X, labels.astype(np.int64), n_classes)


def split(dataset: Dataset, val_fraction: float, seed: int = 0):
    """Seeded ``(train, validation)`` split; validation gets ``floor(n * val_fraction)``."""
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError("val_fraction must lie in [0, 1)")
    n = len(dataset)
    perm = np.random.default_rng([seed, 0]).permutation(n)
    n_val = int(np.floor(n * val_fraction))
    return dataset.subset(np.sort(perm[n_val:])), dataset.subset(np.sort(perm[:n_val]))


def synth_blobs(classes: int, per_class: int, dim: int, separation: float, seed: int = 0,
                spread: float = 0.05) -> Dataset:
    """Gaussian blobs in ``[0, 1]^dim``.

    Centers are drawn in the unit cube and pushed apart to pairwise
    distance ``>= separation * spread`` where possible; points are clipped
    to the cube.
    """
    rng = np.random.default_rng(seed)
    if classes * per_class == 0:
        return Dataset(np.zeros((0, dim)), np.zeros(0, dtype=np.int64), max(classes, 1))
    centers = np.empty((classes, dim))
    for k in range(classes):
        best, best_gap = None, -1.0
        for _ in range(200):
            c = rng.uniform(0.15, 0.85, size=dim)
            gap = np.min(np.linalg.norm(centers[:k] - c, axis=1)) if k else np.inf
            if gap >= separation * spread:
                best = c
                break
            if gap > best_gap:
                best, best_gap = c, gap
        centers[k] = best
    X = np.concatenate([rng.normal(c, spread, size=(per_class, dim)) for c in centers])
    y = np.repeat(np.arange(classes), per_class)
    return Dataset(np.clip(X, 0.0, 1.0), y, classes)


def synth_sequences(length: int, n: int, seed: int = 0) -> Dataset:
    """Scalar sequences in ``[0, 1]``; label 1 iff the sum exceeds ``length / 2``."""
    rng = np.random.default_rng(seed)
    X = rng.uniform(0.0, 1.0, size=(n, length))
    y = (X.sum(axis=1) > 0.5 * length).astype(np.int64)
    return Dataset(X, y, 2)
