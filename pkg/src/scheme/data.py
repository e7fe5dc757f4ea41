"""Datasets: seeded synthetic image sets and IDX (MNIST-format) files."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
STRUCTURES = ("separable", "group_complementary")


@dataclass
class Dataset:
    """Images ``(n, C, H, W)`` in ``[0, 1]`` with integer labels."""

    samples: np.ndarray
    labels: np.ndarray
    split: str = "train"

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.samples.ndim != 4:
            raise ConfigError(f"samples must be (n, C, H, W), got {self.samples.shape}")
        if len(self.samples) != len(self.labels):
            raise ConfigError(f"{len(self.samples)} samples but {len(self.labels)} labels")
        if self.labels.size and self.labels.min() < 0:
            raise ConfigError("labels must be non-negative")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    def subset(self, index, split: str | None = None) -> "Dataset":
        return Dataset(self.samples[index], self.labels[index], split or self.split)


def _bump(h: int, w: int, cy: float, cx: float, sigma: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma**2))


def generate_synthetic(
    seed: int,
    n_per_class: int,
    classes: int,
    grid: tuple[int, int] = (32, 32),
    structure: str = "separable",
    channels: int = 1,
    noise: float = 0.05,
    split: str = "train",
) -> Dataset:
    """Seeded synthetic images.

    ``separable``: each class is a Gaussian intensity bump at its own
    position on a ring, jittered by up to one pixel, plus pixel noise.

    ``group_complementary``: four classes, ``label = 2*a + b``.  Bit ``a``
    only moves a bump in the left half of the image (top or bottom) and bit
    ``b`` only moves one in the right half.  Each bump is clipped at the
    vertical midline, so a half carries no information about the other bit.
    """
    if classes < 2:
        raise ConfigError("need at least two classes")
    if structure not in STRUCTURES:
        raise ConfigError(f"unknown structure {structure!r}; expected one of {STRUCTURES}")
    if structure == "group_complementary" and classes != 4:
        raise ConfigError("group_complementary data has exactly four classes")
    rng = np.random.default_rng(seed)
    h, w = grid
    sigma = min(h, w) / 8.0
    labels = np.repeat(np.arange(classes), n_per_class)
    images = np.empty((labels.size, channels, h, w))
    for i, c in enumerate(labels):
        dy, dx = rng.uniform(-1.0, 1.0, size=2)
        if structure == "separable":
            angle = 2.0 * np.pi * c / classes
            cy = h / 2 + 0.3 * h * np.sin(angle) + dy
            cx = w / 2 + 0.3 * w * np.cos(angle) + dx
            img = _bump(h, w, cy, cx, sigma)
        else:
            a, b = divmod(int(c), 2)
            ey, ex = rng.uniform(-1.0, 1.0, size=2)
            left = np.arange(w) < w // 2  # each bump is cut off at the midline
            img = np.where(left, _bump(h, w, h * (0.25 + 0.5 * a) + dy, w * 0.25 + dx, sigma), 0.0)
            img = img + np.where(left, 0.0, _bump(h, w, h * (0.25 + 0.5 * b) + ey, w * 0.75 + ex, sigma))
        img = 0.1 + 0.8 * img
        images[i] = np.clip(img + rng.normal(scale=noise, size=(channels, h, w)), 0.0, 1.0)
    order = rng.permutation(labels.size)
    return Dataset(images[order], labels[order], split)


def block_mean(samples: np.ndarray, f: int) -> np.ndarray:
    """Average ``f x f`` pixel blocks and flatten: ``(n, C, H, W)`` -> ``(n, C*(H/f)*(W/f))``.

    Coarse pixel features for linear probes; far fewer dimensions than
    samples keeps a probe from memorizing pixel noise.
    """
    n, c, h, w = samples.shape
    if f < 1 or h % f or w % f:
        raise ConfigError(f"block size {f} must divide {h}x{w}")
    return samples.reshape(n, c, h // f, f, w // f, f).mean(axis=(3, 5)).reshape(n, -1)


# ---------------------------------------------------------------------------
# IDX


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _header(raw: bytes, magic: int, n_dims: int, what: str) -> tuple[int, ...]:
    need = 4 * (1 + n_dims)
    if len(raw) < 4:
        raise FormatError(f"{what}: file too short for a magic number", offset=len(raw))
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"{what}: bad magic 0x{found:08x}, expected 0x{magic:08x}", offset=0)
    if len(raw) < need:
        raise FormatError(f"{what}: truncated header", offset=len(raw))
    return struct.unpack(f">{n_dims}I", raw[4:need])


def parse_idx_images(raw: bytes) -> np.ndarray:
    n, rows, cols = _header(raw, IDX_IMAGES_MAGIC, 3, "images")
    size = n * rows * cols
    if len(raw) - 16 < size:
        raise FormatError(f"images: expected {size} pixel bytes, found {len(raw) - 16}", offset=len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=16).reshape(n, rows, cols)


def parse_idx_labels(raw: bytes) -> np.ndarray:
    (n,) = _header(raw, IDX_LABELS_MAGIC, 1, "labels")
    if len(raw) - 8 < n:
        raise FormatError(f"labels: expected {n} label bytes, found {len(raw) - 8}", offset=len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=8)


def load_idx(images_path, labels_path, split: str = "train") -> Dataset:
    """Read an IDX image/label pair; pixels are scaled by 1/255."""
    images = parse_idx_images(_read_bytes(images_path))
    labels = parse_idx_labels(_read_bytes(labels_path))
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels", offset=4)
    return Dataset(images[:, None, :, :] / 255.0, labels.astype(np.int64), split)


def encode_idx(dataset: Dataset) -> tuple[bytes, bytes]:
    """Inverse of :func:`load_idx` for single-channel data: ``(image_bytes, label_bytes)``."""
    n, c, rows, cols = dataset.samples.shape
    if c != 1:
        raise ConfigError("IDX images are single-channel")
    if dataset.labels.size and dataset.labels.max() > 255:
        raise ConfigError("IDX labels are single bytes")
    pixels = np.rint(dataset.samples[:, 0] * 255.0).clip(0, 255).astype(np.uint8)
    images = struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + pixels.tobytes()
    labels = struct.pack(">II", IDX_LABELS_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes()
    return images, labels


def save_idx(dataset: Dataset, images_path, labels_path) -> None:
    images, labels = encode_idx(dataset)
    Path(images_path).write_bytes(images)
    Path(labels_path).write_bytes(labels)
