"""Datasets: CIFAR-10 binary batches, a synthetic Gaussian-blob generator, augmentation."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

from esdnet.errors import ConfigError, DataError

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)


@dataclass
class Dataset:
    images: np.ndarray  # float32, N x C x H x W
    labels: np.ndarray  # int64, N
    num_classes: int

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise DataError(f"images {self.images.shape} and labels {self.labels.shape} disagree")

    def __len__(self):
        return int(self.labels.shape[0])

    def subset(self, index) -> "Dataset":
        return Dataset(self.images[index], self.labels[index], self.num_classes)


# -- CIFAR-10 --------------------------------------------------------------------


def parse_cifar10_bytes(raw: bytes, source: str = "<bytes>") -> Tuple[np.ndarray, np.ndarray]:
    """Split a CIFAR-10 binary blob into ``(labels uint8 [N], pixels uint8 [N, 3, 32, 32])``."""
    if len(raw) % CIFAR_RECORD:
        whole = len(raw) // CIFAR_RECORD
        raise DataError(f"{source}: truncated record at byte offset {whole * CIFAR_RECORD} "
                        f"({len(raw)} bytes is not a multiple of {CIFAR_RECORD})")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].copy()
    bad = np.flatnonzero(labels >= 10)
    if bad.size:
        raise DataError(f"{source}: label {labels[bad[0]]} >= 10 at byte offset {bad[0] * CIFAR_RECORD}")
    pixels = records[:, 1:].reshape(-1, *CIFAR_SHAPE).copy()
    return labels, pixels


def serialize_cifar10(labels: np.ndarray, pixels: np.ndarray) -> bytes:
    """Inverse of :func:`parse_cifar10_bytes`."""
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(labels.shape[0], -1)
    if pixels.shape[1] != CIFAR_RECORD - 1:
        raise DataError(f"each record needs {CIFAR_RECORD - 1} pixel bytes, got {pixels.shape[1]}")
    return np.concatenate([labels, pixels], axis=1).tobytes()


def read_cifar10_file(path) -> Tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    return parse_cifar10_bytes(path.read_bytes(), str(path))


def normalize_pixels(pixels: np.ndarray, mean=CIFAR_MEAN, std=CIFAR_STD) -> np.ndarray:
    x = pixels.astype(np.float32) / np.float32(255.0)
    m = np.asarray(mean, dtype=np.float32)[None, :, None, None]
    s = np.asarray(std, dtype=np.float32)[None, :, None, None]
    return (x - m) / s


def first_k_per_class(labels: np.ndarray, k: int, num_classes: int = 10) -> np.ndarray:
    """Indices of the first ``k`` samples of every class, in file order."""
    picks = [np.flatnonzero(labels == c)[:k] for c in range(num_classes)]
    return np.sort(np.concatenate(picks))


def load_cifar10(
    directory,
    subset: Optional[int] = None,
    test_subset: Optional[int] = None,
    mean: Sequence[float] = CIFAR_MEAN,
    std: Sequence[float] = CIFAR_STD,
) -> Tuple[Dataset, Dataset]:
    """Load the standard binary batches from ``directory``.

    ``subset`` / ``test_subset`` keep the first k images of each class.
    """
    directory = Path(directory)
    out = []
    for files, k in ((CIFAR_TRAIN_FILES, subset), (CIFAR_TEST_FILES, test_subset)):
        present = [directory / f for f in files if (directory / f).exists()]
        if not present:
            raise DataError(f"{directory}: none of {files} found")
        parts = [read_cifar10_file(p) for p in present]
        labels = np.concatenate([p[0] for p in parts])
        pixels = np.concatenate([p[1] for p in parts])
        if k is not None:
            idx = first_k_per_class(labels, k)
            labels, pixels = labels[idx], pixels[idx]
        out.append(Dataset(normalize_pixels(pixels, mean, std), labels.astype(np.int64), 10))
    return out[0], out[1]


def find_cifar10(explicit=None) -> Optional[Path]:
    """Resolve a CIFAR-10 directory from an argument, ``$ESDNET_CIFAR10_DIR`` or ./data."""
    candidates = [explicit, os.environ.get("ESDNET_CIFAR10_DIR"), "data/cifar-10-batches-bin"]
    for c in candidates:
        if c and (Path(c) / "test_batch.bin").exists():
            return Path(c)
    return None


# -- synthetic -------------------------------------------------------------------


def gen_synthetic(
    num_classes: int,
    per_class: int,
    size=(32, 32),
    seed: int = 0,
    noise: float = 0.1,
    channels: int = 3,
) -> Dataset:
    """Class-conditional Gaussian-blob images.

    Class ``c`` puts a blob at angle ``2 pi c / M`` around the image centre,
    in channel ``c mod channels``; samples add i.i.d. Gaussian pixel noise.
    Labels come out grouped by class, exactly ``per_class`` each.
    """
    if num_classes < 2:
        raise ConfigError(f"synthetic data needs at least 2 classes, got {num_classes}")
    if per_class < 0 or noise < 0:
        raise ConfigError("per_class and noise must be non-negative")
    h, w = (size, size) if isinstance(size, int) else tuple(size)
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    sigma = max(h, w) / 8.0
    radius = min(h, w) / 4.0
    templates = np.zeros((num_classes, channels, h, w), dtype=np.float32)
    for c in range(num_classes):
        theta = 2 * np.pi * c / num_classes
        cy, cx = (h - 1) / 2 + radius * np.sin(theta), (w - 1) / 2 + radius * np.cos(theta)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        templates[c, c % channels] = 2.0 * blob
        templates[c] += 0.5 * blob
    labels = np.repeat(np.arange(num_classes), per_class)
    images = templates[labels] + noise * rng.standard_normal((labels.size, channels, h, w)).astype(np.float32)
    return Dataset(images, labels, num_classes)


# -- augmentation ----------------------------------------------------------------


def augment_flip_crop(images: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random horizontal flip, then zero-pad by ``pad`` and take a random crop."""
    n, c, h, w = images.shape
    flips = rng.random(n) < 0.5
    out = images.copy()
    out[flips] = out[flips, :, :, ::-1]
    padded = np.pad(out, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    for i in range(n):
        out[i] = padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
    return out
