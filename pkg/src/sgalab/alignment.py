"""Gram-alignment losses between generative features and a frozen prior.

Feature matrices are ``(N, C)`` arrays (patches by channels) or batches
``(B, N, C)``; batched losses are averaged over the batch.  Loss functions
take raw features and normalize rows internally, so callers never
pre-normalize.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ContractError, DegenerateRowError, ShapeError
from .numerics.layers import AdaptiveAvgPool, Conv2d
from .numerics.rng import RngState

MIN_ROW_NORM = 1e-12
FEATURE_MAGIC = b"SGAFEAT1"


def _as_batch(m):
    m = np.asarray(m)
    if m.ndim == 2:
        return m[None], True
    if m.ndim == 3:
        return m, False
    raise ShapeError(f"feature matrix must be (N, C) or (B, N, C), got {m.shape}")


def _normalize(m):
    norms = np.linalg.norm(m, axis=-1, keepdims=True)
    bad = norms[..., 0] < MIN_ROW_NORM
    if bad.any():
        idx = np.argwhere(bad)[0]
        raise DegenerateRowError(int(idx[-1]), float(norms[tuple(idx)][0]))
    return m / norms, norms


def row_l2_normalize(m) -> np.ndarray:
    """Divide every row by its Euclidean norm."""
    m = np.asarray(m)
    if m.ndim < 2:
        raise ShapeError(f"expected a matrix, got shape {m.shape}")
    return _normalize(m)[0]


def gram(m, tol=1e-6) -> np.ndarray:
    """Spatial Gram matrix ``M M^T`` of row-normalized features."""
    m = np.asarray(m)
    if m.ndim < 2:
        raise ShapeError(f"expected a matrix, got shape {m.shape}")
    dev = np.abs(np.linalg.norm(m, axis=-1) - 1.0)
    if dev.size and dev.max() > tol:
        raise ContractError(f"gram expects unit rows; worst |norm - 1| = {dev.max():.3e}")
    return m @ np.swapaxes(m, -1, -2)


def _pair(h_g, h_f, same_channels):
    g, _ = _as_batch(h_g)
    f, _ = _as_batch(h_f)
    if g.shape[1] != f.shape[1]:
        raise ShapeError(f"patch counts differ: {g.shape[1]} vs {f.shape[1]}")
    if g.shape[0] != f.shape[0] and f.shape[0] != 1:
        raise ShapeError(f"batch sizes differ: {g.shape[0]} vs {f.shape[0]}")
    if same_channels and g.shape[2] != f.shape[2]:
        raise ShapeError(f"channel counts differ: {g.shape[2]} vs {f.shape[2]}")
    return g, f


def _through_normalization(d_unit, unit, norms):
    # (I - u u^T) / ||h| applied row-wise
    radial = np.sum(d_unit * unit, axis=-1, keepdims=True)
    return (d_unit - unit * radial) / norms


def sga_value_and_grad(h_g, h_f, need_grad=True):
    """Batch-mean of ``||G_g - G_f||_F^2 / N^2`` and its gradient w.r.t. ``h_g``."""
    single = np.asarray(h_g).ndim == 2
    g, f = _pair(h_g, h_f, same_channels=False)
    ug, ng = _normalize(g)
    uf, _ = _normalize(f)
    n = g.shape[1]
    diff = ug @ np.swapaxes(ug, -1, -2) - uf @ np.swapaxes(uf, -1, -2)
    per_sample = np.sum(diff * diff, axis=(1, 2)) / n**2
    value = float(per_sample.mean())
    if not need_grad:
        return value, None
    d_unit = (4.0 / n**2) * (diff @ ug) / g.shape[0]
    grad = _through_normalization(d_unit, ug, ng)
    return value, grad[0] if single else grad


def sga_loss(h_g_proj, h_f) -> float:
    return sga_value_and_grad(h_g_proj, h_f, need_grad=False)[0]


def sga_loss_grad(h_g_proj, h_f) -> np.ndarray:
    return sga_value_and_grad(h_g_proj, h_f)[1]


def repa_value_and_grad(h_g, h_f, need_grad=True):
    """Batch-mean of ``||H~_g - H~_f||_F^2 / N`` and its gradient w.r.t. ``h_g``."""
    single = np.asarray(h_g).ndim == 2
    g, f = _pair(h_g, h_f, same_channels=True)
    ug, ng = _normalize(g)
    uf, _ = _normalize(f)
    n = g.shape[1]
    diff = ug - uf
    value = float((np.sum(diff * diff, axis=(1, 2)) / n).mean())
    if not need_grad:
        return value, None
    d_unit = (2.0 / n) * diff / g.shape[0]
    grad = _through_normalization(d_unit, ug, ng)
    return value, grad[0] if single else grad


def repa_loss(h_g_proj, h_f) -> float:
    return repa_value_and_grad(h_g_proj, h_f, need_grad=False)[0]


def repa_loss_trace_form(h_g_proj, h_f) -> float:
    """``2 - (2/N) tr(H~_g H~_f^T)``; equal to :func:`repa_loss` for unit rows."""
    g, f = _pair(h_g_proj, h_f, same_channels=True)
    ug, uf = _normalize(g)[0], _normalize(f)[0]
    n = g.shape[1]
    return float((2.0 - 2.0 / n * np.sum(ug * uf, axis=(1, 2))).mean())


def repa_loss_grad(h_g_proj, h_f) -> np.ndarray:
    return repa_value_and_grad(h_g_proj, h_f)[1]


def alignment_value_and_grad(mode: str, h_g, h_f):
    if mode == "sga":
        return sga_value_and_grad(h_g, h_f)
    if mode == "patchwise":
        return repa_value_and_grad(h_g, h_f)
    raise ValueError(f"unknown alignment mode {mode!r}")


class ProjectionHead:
    """3x3 same-padded convolution, optionally strided, then optional adaptive pooling.

    Maps a ``(B, h, w, C_g)`` hidden state to ``(B, N, C_f)`` patch features.
    """

    def __init__(self, c_in, c_out, stride=1, pool_target=None, *,
                 rng: RngState | None = None, dtype=np.float32):
        if stride not in (1, 2):
            raise ShapeError(f"projection stride must be 1 or 2, got {stride}")
        self.conv = Conv2d(c_in, c_out, 3, stride, 1, rng=rng, dtype=dtype)
        self.pool = AdaptiveAvgPool(pool_target) if pool_target is not None else None
        self.c_out = c_out

    @property
    def params(self):
        return self.conv.params

    def forward_map(self, hidden):
        y = self.conv.forward(hidden)
        if self.pool is not None:
            th, tw = self.pool.target
            if th > y.shape[1] or tw > y.shape[2]:
                raise ShapeError(f"pool target {self.pool.target} exceeds map {y.shape[1:3]}")
            y = self.pool.forward(y)
        return y

    def forward(self, hidden):
        y = self.forward_map(np.asarray(hidden))
        b, h, w, c = y.shape
        return y.reshape(b, h * w, c)

    __call__ = forward

    def backward(self, hidden, d_features):
        y = self.conv.forward(hidden)
        dy = d_features.reshape(d_features.shape[0], *self._grid(y), self.c_out)
        if self.pool is not None:
            dy, _ = self.pool.backward(y, dy)
        return self.conv.backward(hidden, dy)

    def _grid(self, conv_out):
        if self.pool is not None:
            return self.pool.target
        return conv_out.shape[1:3]


def project(head: ProjectionHead, hidden) -> np.ndarray:
    """Apply ``head`` to a single ``(h, w, C_g)`` map or a batch."""
    hidden = np.asarray(hidden)
    if hidden.ndim == 3:
        return head.forward(hidden[None])[0]
    return head.forward(hidden)


def write_features(path, m) -> None:
    m = np.asarray(m, dtype="<f8")
    if m.ndim != 2:
        raise ShapeError(f"feature file holds one (N, C) matrix, got {m.shape}")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<QQ", *m.shape))
        fh.write(np.ascontiguousarray(m).tobytes())


def read_features(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:8] != FEATURE_MAGIC:
        raise ContractError(f"{path}: not a feature file (bad magic)")
    n, c = struct.unpack("<QQ", data[8:24])
    body = data[24:]
    if len(body) != 8 * n * c:
        raise ContractError(f"{path}: expected {n * c} values, found {len(body) // 8}")
    return np.frombuffer(body, dtype="<f8").reshape(n, c).astype(np.float64)
