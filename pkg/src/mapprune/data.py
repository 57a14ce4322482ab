"""Datasets: IDX (MNIST-format) files and a procedural stand-in corpus."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .rng import stream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    class_count: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataError(f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return len(self.labels)

    @property
    def input_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.class_count, self.split)


# ---------------------------------------------------------------------------
# IDX


def _read_idx(path, expected_magic, ndim):
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise DataError(f"{path}: file too short for an IDX header")
    magic = struct.unpack_from(">I", data, 0)[0]
    if magic != expected_magic:
        raise DataError(f"{path}: bad magic 0x{magic:08x} at offset 0 (expected 0x{expected_magic:08x})")
    header = 4 + 4 * ndim
    if len(data) < header:
        raise DataError(f"{path}: truncated dimension header")
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    n = int(np.prod(dims))
    if len(data) < header + n:
        raise DataError(f"{path}: truncated payload ({len(data) - header} of {n} bytes)")
    return np.frombuffer(data, dtype=np.uint8, count=n, offset=header).reshape(dims)


def load_idx(images_path, labels_path, split: str = "train", class_count: int | None = None) -> Dataset:
    """Read an IDX image/label pair; pixels are scaled by 1/255."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise DataError(f"image count {len(images)} does not match label count {len(labels)}")
    labels = labels.astype(np.int64)
    if class_count is None:
        class_count = int(labels.max()) + 1 if labels.size else 1
    return Dataset(images[:, None].astype(np.float64) / 255.0, labels, class_count, split)


def write_idx(images_path, labels_path, images_u8, labels_u8):
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels_u8 = np.asarray(labels_u8, dtype=np.uint8)
    Path(images_path).write_bytes(
        struct.pack(">I3I", IDX_IMAGES_MAGIC, *images_u8.shape) + images_u8.tobytes()
    )
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels_u8)) + labels_u8.tobytes())


# ---------------------------------------------------------------------------
# procedural images


def _render(rng, cls, classes, hw):
    yy, xx = np.mgrid[0:hw, 0:hw].astype(np.float64)
    c = (hw - 1) / 2.0
    img = np.zeros((hw, hw))
    # oriented bar through a jittered centre; orientation encodes the class
    theta = np.pi * cls / classes + rng.normal(0.0, 0.04)
    cy, cx = c + rng.uniform(-hw / 8, hw / 8, size=2)
    dist = np.abs(-(yy - cy) * np.cos(theta) + (xx - cx) * np.sin(theta))
    along = np.abs((yy - cy) * np.sin(theta) + (xx - cx) * np.cos(theta))
    half_len = rng.uniform(0.3, 0.45) * hw
    bar = np.clip(1.2 - dist, 0.0, 1.0) * (along <= half_len)
    img = np.maximum(img, rng.uniform(0.7, 1.0) * bar)
    # class-independent distractor blob
    by, bx = rng.uniform(0, hw - 1, size=2)
    blob = np.exp(-((yy - by) ** 2 + (xx - bx) ** 2) / (2 * rng.uniform(0.8, 1.6) ** 2))
    img = np.maximum(img, rng.uniform(0.3, 0.8) * blob)
    return img


def synth_dataset(classes: int, per_class: int, hw: int, seed: int, split: str = "train",
                  noise: float = 0.1) -> Dataset:
    """Single-channel images of a class-oriented bar plus a random blob.

    Class ``c`` draws a bar at angle ``pi * c / classes`` (small angular
    jitter) through a jittered centre, adds a class-independent Gaussian blob
    and i.i.d. Gaussian pixel noise with std ``noise``; pixels are clipped to
    [0, 1]. Train and test splits come from independent seeded streams.
    """
    if hw < 8:
        raise ConfigError(f"hw must be >= 8, got {hw}")
    if classes < 1 or per_class < 1:
        raise ConfigError("classes and per_class must be positive")
    rng = stream(seed, "synth_test" if split == "test" else "synth_train")
    labels = np.repeat(np.arange(classes), per_class)
    rng.shuffle(labels)
    images = np.empty((len(labels), 1, hw, hw))
    for n, cls in enumerate(labels):
        img = _render(rng, int(cls), classes, hw)
        images[n, 0] = np.clip(img + rng.normal(0.0, noise, size=img.shape), 0.0, 1.0)
    return Dataset(images, labels, classes, split)
