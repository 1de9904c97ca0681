"""Datasets: IDX files and a synthetic fixture for overfitting checks."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class IdxFormatError(ValueError):
    pass


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray   # count x 3 x H x W, float32
    labels: np.ndarray   # count, int64
    num_classes: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError(f"labels fall outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_size(self) -> tuple[int, int]:
        return self.images.shape[2], self.images.shape[3]


def _read_header(raw: bytes, path, expected_magic: int, ndim: int) -> tuple[int, ...]:
    if len(raw) < 4 * (1 + ndim):
        raise IdxFormatError(f"{path}: file too short for an IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    return struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])


def read_idx_images(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    count, rows, cols = _read_header(raw, path, IDX_IMAGES, 3)
    body = raw[16:]
    if len(body) != count * rows * cols:
        raise IdxFormatError(f"{path}: expected {count * rows * cols} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(count, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    (count,) = _read_header(raw, path, IDX_LABELS, 1)
    body = raw[8:]
    if len(body) != count:
        raise IdxFormatError(f"{path}: expected {count} label bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).copy()


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, r, c = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES, n, r, c) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS, len(labels)) + labels.tobytes())


def replication_factor(h: int, w: int) -> int:
    """Smallest integer upscale making both sides divisible by 4."""
    for k in (1, 2, 4):
        if (h * k) % 4 == 0 and (w * k) % 4 == 0:
            return k
    raise AssertionError("unreachable")


def preprocess(pixels: np.ndarray) -> np.ndarray:
    """uint8 ``count x H x W`` -> float32 ``count x 3 x H' x W'`` in [-1, 1]."""
    x = pixels.astype(np.float32) / 255.0
    x = (x - 0.5) / 0.5
    k = replication_factor(*x.shape[1:])
    if k > 1:
        x = x.repeat(k, axis=1).repeat(k, axis=2)
    return np.repeat(x[:, None], 3, axis=1)


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    pixels = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(pixels) != len(labels):
        raise DatasetError(f"{images_path} holds {len(pixels)} images but {labels_path} holds {len(labels)} labels")
    k = num_classes if num_classes is not None else int(labels.max()) + 1 if labels.size else 0
    return Dataset(preprocess(pixels), labels.astype(np.int64), k)


def center_crop(images: np.ndarray, size: int) -> np.ndarray:
    h, w = images.shape[-2:]
    if h < size or w < size:
        raise DatasetError(f"images of {h}x{w} are smaller than the model input {size}")
    top, left = (h - size) // 2, (w - size) // 2
    return images[..., top : top + size, left : left + size]


def synthetic_blobs(count: int = 64, size: int = 16, num_classes: int = 2, seed: int = 0,
                    block: int = 4, noise: float = 0.1) -> Dataset:
    """Bright square blocks placed around a class-specific centre.

    Each class owns a centre spread evenly around the image centre; the block
    position jitters with a Gaussian of std 1 pixel.
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(count) % num_classes
    rng.shuffle(labels)
    angles = 2 * np.pi * np.arange(num_classes) / num_classes
    radius = size / 4
    centres = np.stack([size / 2 + radius * np.sin(angles), size / 2 + radius * np.cos(angles)], axis=1)
    images = np.full((count, size, size), -1.0)
    images += noise * rng.standard_normal(images.shape)
    for i, lab in enumerate(labels):
        cy, cx = centres[lab] + rng.standard_normal(2)
        y0 = int(np.clip(round(cy - block / 2), 0, size - block))
        x0 = int(np.clip(round(cx - block / 2), 0, size - block))
        images[i, y0 : y0 + block, x0 : x0 + block] = 1.0
    images = np.repeat(images[:, None], 3, axis=1).astype(np.float32)
    return Dataset(images, labels.astype(np.int64), num_classes)
