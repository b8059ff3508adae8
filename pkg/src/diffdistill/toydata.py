"""Procedurally generated shape dataset for desk-scale end-to-end runs.

Four classes (filled square, disk, cross, triangle), each with a
class-specific tint and jittered geometry on a dark background. Pixels are
quantized through the byte lattice at creation, so in-memory tensors match
a file round trip exactly.
"""

from __future__ import annotations

import numpy as np

from .datastore import Dataset, pixels_to_unit, seed_substream, unit_to_pixels

CLASS_NAMES = ("square", "disk", "cross", "triangle")

_TINTS = np.array([
    [0.85, 0.25, 0.25],   # square: red
    [0.25, 0.85, 0.30],   # disk: green
    [0.30, 0.45, 0.90],   # cross: blue
    [0.85, 0.80, 0.25],   # triangle: yellow
])


def _render(label: int, rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = size / 2 + rng.uniform(-2, 2)
    cx = size / 2 + rng.uniform(-2, 2)
    extent = rng.uniform(0.28, 0.38) * size
    if label == 0:
        mask = (np.abs(yy - cy) <= extent) & (np.abs(xx - cx) <= extent)
    elif label == 1:
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= extent ** 2
    elif label == 2:
        bar = extent * 0.45
        mask = (((np.abs(yy - cy) <= bar) & (np.abs(xx - cx) <= extent * 1.25)) |
                ((np.abs(xx - cx) <= bar) & (np.abs(yy - cy) <= extent * 1.25)))
    elif label == 3:
        h = extent * 1.2
        rel_y = yy - (cy - h / 2)
        half_w = np.clip(rel_y, 0, h) / h * extent * 1.1
        mask = (rel_y >= 0) & (rel_y <= h) & (np.abs(xx - cx) <= half_w)
    else:
        raise ValueError(f"label {label} out of range for {len(CLASS_NAMES)} shape classes")
    fg = _TINTS[label] + rng.uniform(-0.12, 0.12, size=3)
    bg = np.full(3, -0.75) + rng.uniform(-0.1, 0.1, size=3)
    img = np.where(mask[..., None], fg, bg)
    img += rng.normal(0.0, 0.05, size=img.shape)
    return np.clip(img, -1.0, 1.0)


def make_shape_dataset(n: int, seed: int, image_size: int = 16,
                       tag: str = "toy") -> Dataset:
    """n labeled shape images with labels cycling over the four classes."""
    num_classes = len(CLASS_NAMES)
    images = np.empty((n, image_size, image_size, 3), dtype=np.float32)
    labels = (np.arange(n) % num_classes).astype(np.int64)
    for i in range(n):
        rng = seed_substream(seed, tag, i)
        images[i] = _render(int(labels[i]), rng, image_size)
    images = pixels_to_unit(unit_to_pixels(images))  # snap to the byte lattice
    return Dataset(images=images, labels=labels, num_classes=num_classes)


def make_train_test(n_train: int = 2000, n_test: int = 500, seed: int = 0,
                    image_size: int = 16) -> tuple[Dataset, Dataset]:
    train = make_shape_dataset(n_train, seed, image_size, tag="toy-train")
    test = make_shape_dataset(n_test, seed, image_size, tag="toy-test")
    return train, test
