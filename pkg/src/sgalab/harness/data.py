"""Procedural image corpus: gradients, anti-aliased shapes and a texture band.

Every image is a pure function of ``(seed, index, size)``.  The label is
the kind of the dominant (largest, first-drawn) shape.  Labels are
stratified: each aligned block of ten indices holds every class once, in a
seeded order, so class counts are balanced exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ShapeError
from ..numerics.rng import RngState, mix64

SHAPE_KINDS = ("circle", "square", "triangle", "diamond", "ring",
               "cross", "ellipse", "hexagon", "star", "crescent")
NUM_CLASSES = len(SHAPE_KINDS)
_LABEL_STREAM = 1 << 40


def _box(px, py, hx, hy):
    qx, qy = np.abs(px) - hx, np.abs(py) - hy
    outside = np.hypot(np.maximum(qx, 0), np.maximum(qy, 0))
    return outside + np.minimum(np.maximum(qx, qy), 0)


def shape_sdf(kind: int, px, py, r):
    """Signed distance (approximate for some kinds) to a shape of radius ``r`` at the origin."""
    name = SHAPE_KINDS[kind]
    rad = np.hypot(px, py)
    if name == "circle":
        return rad - r
    if name == "square":
        return _box(px, py, 0.8 * r, 0.8 * r)
    if name == "triangle":
        k = np.sqrt(3.0)
        x, y = np.abs(px), py + 0.25 * r
        return np.maximum(k * 0.5 * x + 0.5 * y, -y) - 0.5 * r
    if name == "diamond":
        return (np.abs(px) + np.abs(py) - r) / np.sqrt(2.0)
    if name == "ring":
        return np.abs(rad - 0.7 * r) - 0.25 * r
    if name == "cross":
        return np.minimum(_box(px, py, r, 0.3 * r), _box(px, py, 0.3 * r, r))
    if name == "ellipse":
        a, b = r, 0.55 * r
        return (np.hypot(px / a, py / b) - 1.0) * b
    if name == "hexagon":
        x, y = np.abs(px), np.abs(py)
        return np.maximum(x * 0.8660254 + y * 0.5, y) - 0.85 * r
    if name == "star":
        ang = np.arctan2(py, px)
        return rad - r * (0.65 + 0.35 * np.cos(5 * ang))
    # crescent
    return np.maximum(rad - r, -(np.hypot(px - 0.45 * r, py) - 0.8 * r))


@dataclass
class ImageParams:
    label: int
    shapes: list  # (kind, cx, cy, scale, angle)
    texture_frequency: float


def image_label(seed: int, index: int) -> int:
    block, slot = divmod(index, NUM_CLASSES)
    return int(RngState(seed).split(_LABEL_STREAM + block).permutation(NUM_CLASSES)[slot])


def generate_image(seed: int, index: int, size: int):
    """``(size, size, 3)`` float64 image in [-1, 1], its label and its parameters."""
    if size < 1:
        raise ShapeError("size must be positive")
    rng = RngState(seed).split(index)
    label = image_label(seed, index)
    u = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    py, px = np.meshgrid(u, u, indexing="ij")
    pixel = 2.0 / size

    base = rng.uniform((3,)) * 1.2 - 0.6
    slope = rng.uniform((3,)) * 0.6 - 0.3
    phi = rng.uniform() * 2 * np.pi
    ramp = np.cos(phi) * px + np.sin(phi) * py
    img = base + slope * ramp[..., None]

    shapes = []
    n_extra = int(rng.integers(3))
    for j in range(1 + n_extra):
        kind = label if j == 0 else int(rng.integers(NUM_CLASSES))
        scale = 0.35 + 0.2 * rng.uniform() if j == 0 else 0.12 + 0.13 * rng.uniform()
        cx, cy = (rng.uniform((2,)) * 2 - 1) * (0.9 - scale)
        angle = rng.uniform() * 2 * np.pi
        color = rng.uniform((3,)) * 1.8 - 0.9
        ca, sa = np.cos(angle), np.sin(angle)
        qx = ca * (px - cx) + sa * (py - cy)
        qy = -sa * (px - cx) + ca * (py - cy)
        cover = np.clip(0.5 - shape_sdf(kind, qx, qy, scale) / pixel, 0.0, 1.0)[..., None]
        img = img * (1 - cover) + color * cover
        shapes.append((kind, float(cx), float(cy), float(scale), float(angle)))

    freq = size / 8.0 + rng.uniform() * size / 8.0
    center = rng.uniform() * 1.4 - 0.7
    vertical = rng.uniform() < 0.5
    along, across = (py, px) if vertical else (px, py)
    band = np.clip(0.5 - (np.abs(across - center) - 0.12) / pixel, 0.0, 1.0)
    texture = 0.25 * np.sin(np.pi * freq * along + rng.uniform() * 2 * np.pi)
    img = img + (band * texture)[..., None]
    return np.clip(img, -1.0, 1.0), label, ImageParams(label, shapes, float(freq))


@dataclass
class SyntheticDataset:
    images: np.ndarray  # (n, S, S, 3)
    labels: np.ndarray
    params: list

    def __len__(self):
        return len(self.labels)


def generate_dataset(seed: int, n: int, size: int) -> SyntheticDataset:
    if n < 1:
        raise ShapeError("n must be >= 1")
    if size % 16:
        raise ShapeError(f"size must be divisible by 16, got {size}")
    imgs, labels, params = [], [], []
    for i in range(n):
        img, lab, p = generate_image(seed, i, size)
        imgs.append(img)
        labels.append(lab)
        params.append(p)
    return SyntheticDataset(np.stack(imgs), np.asarray(labels, dtype=np.int64), params)


def holdout_mask(n: int, fraction: float = 0.1) -> np.ndarray:
    """True for held-out indices, chosen by hashing the index."""
    buckets = 1 << 20
    return np.array([mix64(i) % buckets < fraction * buckets for i in range(n)])
