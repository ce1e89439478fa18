"""Frozen stand-in for a vision foundation model.

A seeded pyramid of four stride-2 convolutions (8, 16, 32, C_f channels),
each followed by ReLU and a per-position response normalization that
divides the channel vector at every location by its RMS.  Edge padding
keeps the stack translation-equivariant on constant fields.  Features are
pooled to a patch grid and flattened row-major to ``(N, C_f)``.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import ShapeError
from .numerics.layers import Conv2d, adaptive_avg_pool
from .numerics.rng import RngState

STAGE_CHANNELS = (8, 16, 32)
DOWNSAMPLE = 16
RESPONSE_EPS = 1e-6


def grid_for_resolution(image_hw, patch_budget: int) -> tuple[int, int]:
    """Patch grid whose long edge equals ``patch_budget``; the short edge follows the aspect ratio."""
    h, w = image_hw
    if patch_budget < 1:
        raise ShapeError("patch_budget must be >= 1")
    if h >= w:
        return patch_budget, max(1, int(round(patch_budget * w / h)))
    return max(1, int(round(patch_budget * h / w))), patch_budget


class FoundationPrior:
    def __init__(self, seed: int, channels: int = 32, grid=None):
        self.seed = seed
        self.channels = channels
        self.grid = None if grid is None else tuple(grid)
        rng = RngState(seed)
        widths = (3, *STAGE_CHANNELS, channels)
        self.stages = [
            Conv2d(widths[i], widths[i + 1], 3, 2, 1, rng=rng.split(i), dtype=np.float32, pad_mode="edge")
            for i in range(4)
        ]
        for i, conv in enumerate(self.stages):
            # small random biases so constant inputs do not sit on the ReLU kink
            conv.params["b"][...] = 0.1 * rng.split(100 + i).normal(conv.params["b"].shape)
        # float32 storage so checkpoints hold the prior bit-exactly; evaluation runs in float64
        for conv in self.stages:
            for v in conv.params.values():
                v.setflags(write=False)

    @property
    def params(self):
        return {f"prior.{i}.{k}": v for i, c in enumerate(self.stages) for k, v in c.params.items()}

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k]).tobytes())
        return h.hexdigest()

    def feature_map(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[-1] != 3:
            raise ShapeError(f"prior expects (B, H, W, 3) images, got {x.shape}")
        if x.shape[1] % DOWNSAMPLE or x.shape[2] % DOWNSAMPLE:
            raise ShapeError(f"image size {x.shape[1:3]} not divisible by {DOWNSAMPLE}")
        for conv in self.stages:
            x = np.maximum(conv.forward(x), 0.0)
            x = x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RESPONSE_EPS)
        return x

    def extract_features(self, x, grid=None) -> np.ndarray:
        """``(B, N, C_f)`` patch features (``(N, C_f)`` for a single image)."""
        single = np.asarray(x).ndim == 3
        fmap = self.feature_map(x)
        grid = grid or self.grid or fmap.shape[1:3]
        if tuple(grid) != fmap.shape[1:3]:
            fmap = adaptive_avg_pool(fmap, grid)
        b, h, w, c = fmap.shape
        out = fmap.reshape(b, h * w, c)
        return out[0] if single else out

    __call__ = extract_features

    def state_tensors(self) -> dict[str, np.ndarray]:
        return dict(self.params)


def extract_features(prior: FoundationPrior, x, grid=None) -> np.ndarray:
    return prior.extract_features(x, grid)
