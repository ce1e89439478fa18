"""PCA renderings of patch features and binary pixmap output."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..errors import ContractError, ShapeError
from ..numerics.linalg import pca_project

RANGE_GUARD = 1e-9


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write an ``(H, W, 3)`` uint8 array as a binary P6 pixmap."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ShapeError(f"expected (H, W, 3) uint8, got {rgb.shape} {rgb.dtype}")
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos)
            continue
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P6" or int(fields[3]) != 255:
        raise ContractError(f"{path}: not an 8-bit P6 pixmap")
    w, h = int(fields[1]), int(fields[2])
    body = data[pos + 1 :]
    if len(body) != w * h * 3:
        raise ContractError(f"{path}: expected {w * h * 3} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)


def images_to_uint8(x) -> np.ndarray:
    """[-1, 1] floats to [0, 255] bytes."""
    x = np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0)
    return np.round((x + 1.0) * 127.5).astype(np.uint8)


def tile(images, columns=None) -> np.ndarray:
    """Lay out ``(B, H, W, 3)`` images on a grid."""
    images = np.asarray(images)
    b, h, w, c = images.shape
    columns = columns or int(np.ceil(np.sqrt(b)))
    rows = -(-b // columns)
    out = np.zeros((rows * h, columns * w, c), dtype=images.dtype)
    for i in range(b):
        r, col = divmod(i, columns)
        out[r * h : (r + 1) * h, col * w : (col + 1) * w] = images[i]
    return out


def pca_rgb(features, grid) -> np.ndarray:
    """Top three principal scores, min-max scaled per component, on the patch grid."""
    features = np.asarray(features, dtype=np.float64)
    nh, nw = grid
    if features.ndim != 2 or features.shape[0] != nh * nw:
        raise ShapeError(f"{features.shape[0] if features.ndim == 2 else features.shape} patches "
                         f"do not fill a {nh}x{nw} grid")
    k = min(3, *features.shape)
    scores = np.zeros((features.shape[0], 3))
    if features.shape[0] > 1:  # a single patch has no spread; render it flat
        scores[:, :k] = pca_project(features, k)
    lo, hi = scores.min(axis=0), scores.max(axis=0)
    span = hi - lo
    flat = span <= RANGE_GUARD * max(1.0, float(np.abs(scores).max()))
    scaled = np.where(flat, 0.0, (scores - lo) / np.where(flat, 1.0, span))
    return np.round(scaled * 255.0).astype(np.uint8).reshape(nh, nw, 3)


def emit_pca_visualization(features, grid, path, upscale=1) -> np.ndarray:
    rgb = pca_rgb(features, grid)
    if upscale > 1:
        rgb = np.repeat(np.repeat(rgb, upscale, axis=0), upscale, axis=1)
    write_ppm(path, rgb)
    return rgb
