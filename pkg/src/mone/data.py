"""Datasets: the synthetic planted-patch benchmark and IDX file I/O.

The planted-patch generator builds images where exactly one patch carries
the class signal (a fixed binary glyph per class drawn at high contrast on
mid-level background noise), so routing quality can be measured directly:
a good router sends the planted token to a large expert.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError

__all__ = ["Dataset", "synth_planted_patch", "split_dataset", "load_idx", "write_idx"]

_IMAGES_MAGIC = 0x00000803
_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    """Images with integer labels; ``planted_token`` marks the informative
    patch index (row-major over the patch grid) for synthetic data."""

    images: np.ndarray  # (M, H, W, C) float32 in [0, 1]
    labels: np.ndarray  # (M,) int64
    split: str = ""
    planted_token: np.ndarray | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ConfigError(f"images must be (M, H, W, C), got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise ConfigError("images and labels disagree on sample count")

    def __len__(self):
        return len(self.images)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def subset(self, idx) -> "Dataset":
        planted = None if self.planted_token is None else self.planted_token[idx]
        return Dataset(self.images[idx], self.labels[idx], split=self.split, planted_token=planted)


def synth_planted_patch(
    num_samples: int,
    num_classes: int = 10,
    height: int = 32,
    width: int = 32,
    seed: int = 0,
    patch_size: int = 8,
    split: str = "",
) -> Dataset:
    """Background-noise images with one class-defining glyph in a random patch.

    Backgrounds are uniform noise in [0, 0.5); the planted patch draws its
    glyph mask near full brightness and its off-pixels near zero, so the
    informative patch is linearly identifiable. The glyph set depends only
    on (num_classes, patch_size, seed); generation is fully deterministic.
    """
    if height % patch_size or width % patch_size:
        raise ConfigError(f"{height}x{width} image not divisible by patch {patch_size}")
    gh, gw = height // patch_size, width // patch_size
    rng = np.random.default_rng(seed)
    glyphs = rng.random((num_classes, patch_size, patch_size)) < 0.5

    images = rng.uniform(0.0, 0.5, size=(num_samples, height, width, 1)).astype(np.float32)
    labels = rng.integers(0, num_classes, size=num_samples)
    positions = rng.integers(0, gh * gw, size=num_samples)
    bright = rng.uniform(0.75, 1.0, size=(num_samples, patch_size, patch_size))
    dark = rng.uniform(0.0, 0.25, size=(num_samples, patch_size, patch_size))
    for i in range(num_samples):
        mask = glyphs[labels[i]]
        patch = np.where(mask, bright[i], dark[i]).astype(np.float32)
        r, c = divmod(int(positions[i]), gw)
        images[i, r * patch_size : (r + 1) * patch_size, c * patch_size : (c + 1) * patch_size, 0] = patch
    return Dataset(images, labels, split=split, planted_token=positions.astype(np.int64))


def split_dataset(dataset: Dataset, num_train: int, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Deterministic shuffled train/test split."""
    if not 0 < num_train < len(dataset):
        raise ConfigError(f"num_train {num_train} outside (0, {len(dataset)})")
    order = np.random.default_rng(seed).permutation(len(dataset))
    train = dataset.subset(order[:num_train])
    test = dataset.subset(order[num_train:])
    train.split, test.split = "train", "test"
    return train, test


# ---------------------------------------------------------------------------
# IDX format
# ---------------------------------------------------------------------------


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise FormatError(f"truncated IDX file while reading {what}")
    return data


def load_idx(images_path, labels_path) -> Dataset:
    """Parse big-endian IDX image/label files; pixels are scaled to [0, 1]."""
    with open(images_path, "rb") as f:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, "image header"))
        if magic != _IMAGES_MAGIC:
            raise FormatError(f"bad image magic 0x{magic:08x}, expected 0x{_IMAGES_MAGIC:08x}")
        raw = _read_exact(f, count * rows * cols, "image data")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows, cols, 1)

    with open(labels_path, "rb") as f:
        magic, label_count = struct.unpack(">II", _read_exact(f, 8, "label header"))
        if magic != _LABELS_MAGIC:
            raise FormatError(f"bad label magic 0x{magic:08x}, expected 0x{_LABELS_MAGIC:08x}")
        raw = _read_exact(f, label_count, "label data")
    labels = np.frombuffer(raw, dtype=np.uint8)

    if label_count != count:
        raise FormatError(f"image count {count} != label count {label_count}")
    return Dataset(images.astype(np.float32) / 255.0, labels.astype(np.int64))


def write_idx(dataset: Dataset, images_path, labels_path) -> None:
    """Serialize back to IDX; pixels are quantized to uint8."""
    images = np.round(np.clip(dataset.images, 0.0, 1.0) * 255.0).astype(np.uint8)
    count, rows, cols, channels = images.shape
    if channels != 1:
        raise FormatError("IDX image files hold single-channel data")
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", _IMAGES_MAGIC, count, rows, cols))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", _LABELS_MAGIC, count))
        f.write(dataset.labels.astype(np.uint8).tobytes())
