"""Datasets: IDX file parsing and a synthetic separable image family.

The synthetic generator exists so the whole pipeline runs on a desk with no
downloads; classes carry distinct spatial structure that small networks
separate reliably.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from gpat.tensor import ParamSet, Tensor

__all__ = [
    "Dataset",
    "load_mnist_idx",
    "load_mnist_dir",
    "gen_synthetic",
    "save_dataset",
    "load_dataset",
]

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    """Train/test split of [0,1]-valued images with integer labels."""

    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    classes: int

    def __post_init__(self):
        for name in ("train", "test"):
            images = getattr(self, f"{name}_images")
            labels = getattr(self, f"{name}_labels")
            if len(images) != len(labels):
                raise ValueError(f"{name} split: image and label counts differ")
            if len(images) and (images.min() < 0.0 or images.max() > 1.0):
                raise ValueError(f"{name} split: pixel values outside [0, 1]")
            if len(labels) and (labels.min() < 0 or labels.max() >= self.classes):
                raise ValueError(f"{name} split: labels outside [0, {self.classes})")

    @property
    def image_shape(self) -> tuple:
        source = self.train_images if len(self.train_images) else self.test_images
        return tuple(source.shape[1:])


def _read_exact(f, n: int, path, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise ValueError(f"{path}: truncated while reading {what} at offset "
                         f"{f.tell() - len(data)}: wanted {n} bytes, got {len(data)}")
    return data


def _parse_idx_images(path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as f:
        magic, = struct.unpack(">I", _read_exact(f, 4, path, "magic"))
        if magic != IMAGE_MAGIC:
            raise ValueError(f"{path}: bad magic 0x{magic:08x} at offset 0, "
                             f"expected magic 0x{IMAGE_MAGIC:08x}")
        count, rows, cols = struct.unpack(">III", _read_exact(f, 12, path, "header"))
        raw = _read_exact(f, count * rows * cols, path, f"{count} images")
        extra = f.read(1)
        if extra:
            raise ValueError(f"{path}: {len(extra)}+ trailing bytes after "
                             f"{count} images at offset {16 + count * rows * cols}")
    pixels = np.frombuffer(raw, dtype=np.uint8).astype(np.float64) / 255.0
    return pixels.reshape(count, 1, rows, cols)


def _parse_idx_labels(path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as f:
        magic, = struct.unpack(">I", _read_exact(f, 4, path, "magic"))
        if magic != LABEL_MAGIC:
            raise ValueError(f"{path}: bad magic 0x{magic:08x} at offset 0, "
                             f"expected magic 0x{LABEL_MAGIC:08x}")
        count, = struct.unpack(">I", _read_exact(f, 4, path, "header"))
        raw = _read_exact(f, count, path, f"{count} labels")
        extra = f.read(1)
        if extra:
            raise ValueError(f"{path}: {len(extra)}+ trailing bytes after "
                             f"{count} labels at offset {8 + count}")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def load_mnist_idx(images_path, labels_path, split: str = "test") -> Dataset:
    """One IDX image/label file pair as a single-split dataset.

    Big-endian headers; byte 255 maps to exactly 1.0. Truncation, magic and
    count mismatches raise with the offending offset.
    """
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    images = _parse_idx_images(images_path)
    labels = _parse_idx_labels(labels_path)
    if len(images) != len(labels):
        raise ValueError(f"{images_path} holds {len(images)} images but "
                         f"{labels_path} holds {len(labels)} labels")
    empty_i = np.zeros((0,) + images.shape[1:])
    empty_l = np.zeros(0, dtype=np.int64)
    if split == "train":
        return Dataset(images, labels, empty_i, empty_l, classes=10)
    return Dataset(empty_i, empty_l, images, labels, classes=10)


def load_mnist_dir(root) -> Dataset:
    """Standard four-file layout under one directory."""
    root = Path(root)
    train = load_mnist_idx(root / "train-images-idx3-ubyte",
                           root / "train-labels-idx1-ubyte", split="train")
    test = load_mnist_idx(root / "t10k-images-idx3-ubyte",
                          root / "t10k-labels-idx1-ubyte", split="test")
    return Dataset(train.train_images, train.train_labels,
                   test.test_images, test.test_labels, classes=10)


def gen_synthetic(classes: int, shape: tuple = (1, 16, 16), n: int = 600,
                  seed: int = 0, test_fraction: float = 0.25) -> Dataset:
    """Class-conditional striped/blob images that small networks separate.

    Each class owns a spatial frequency, an orientation and a blob corner;
    samples perturb amplitude and phase and add pixel noise. Deterministic
    under the seed; train/test split by index partition.
    """
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    if n < classes:
        raise ValueError(f"need at least one sample per class, got n={n}")
    if not 0 < test_fraction < 1:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    chan, height, width = shape
    yy, xx = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    images = np.zeros((n,) + tuple(shape))
    labels = rng.integers(0, classes, size=n)
    for i in range(n):
        c = int(labels[i])
        freq = 1.0 + c
        angle = np.pi * c / classes
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.35, 0.5)
        axis = np.cos(angle) * xx + np.sin(angle) * yy
        pattern = 0.5 + amp * np.sin(2 * np.pi * freq * axis / width + phase)
        # bright blob in a class-specific corner
        cy = (height - 4) * ((c >> 1) & 1)
        cx = (width - 4) * (c & 1)
        blob = np.exp(-((yy - cy - 2) ** 2 + (xx - cx - 2) ** 2) / 6.0)
        base = 0.75 * pattern + 0.45 * blob
        for ch in range(chan):
            noisy = base + rng.normal(0, 0.04, size=base.shape)
            images[i, ch] = np.clip(noisy, 0.0, 1.0)
    n_test = max(1, int(round(n * test_fraction)))
    return Dataset(train_images=images[n_test:], train_labels=labels[n_test:],
                   test_images=images[:n_test], test_labels=labels[:n_test],
                   classes=classes)


def save_dataset(dataset: Dataset, path) -> None:
    store = ParamSet([
        ("train_images", Tensor(dataset.train_images)),
        ("train_labels", Tensor(dataset.train_labels.astype(np.float64))),
        ("test_images", Tensor(dataset.test_images)),
        ("test_labels", Tensor(dataset.test_labels.astype(np.float64))),
    ])
    store.save(path)
    Path(str(path) + ".json").write_text(json.dumps({"classes": dataset.classes}))


def load_dataset(path) -> Dataset:
    store = ParamSet.load(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    return Dataset(train_images=store["train_images"].data,
                   train_labels=store["train_labels"].data.astype(np.int64),
                   test_images=store["test_images"].data,
                   test_labels=store["test_labels"].data.astype(np.int64),
                   classes=int(meta["classes"]))
