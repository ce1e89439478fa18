"""Reconstruction metrics.  PSNR and SSIM expect values in [0, 1]."""

from __future__ import annotations

import math

import numpy as np

from ..errors import MetricUndefined, ShapeError

PSNR_CAP = 99.0
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
SSIM_WINDOW = 8


def _pair(x, x_hat):
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ShapeError(f"metric inputs differ in shape: {x.shape} vs {x_hat.shape}")
    return x, x_hat


def to_unit(x):
    """Map [-1, 1] images to [0, 1]."""
    return (np.asarray(x, dtype=np.float64) + 1.0) / 2.0


def metric_nmse(x, x_hat) -> float:
    x, x_hat = _pair(x, x_hat)
    energy = float(np.sum(x * x))
    if energy == 0.0:
        raise MetricUndefined("NMSE is undefined for an all-zero reference")
    return float(np.sum((x - x_hat) ** 2)) / energy


def metric_psnr(x, x_hat) -> float:
    x, x_hat = _pair(x, x_hat)
    mse = float(np.mean((x - x_hat) ** 2))
    if mse <= 10.0 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def metric_ssim(x, x_hat) -> float:
    """Mean SSIM over non-overlapping 8x8 windows and channels.

    Accepts ``(H, W, C)`` or ``(B, H, W, C)``; trailing rows and columns that
    do not fill a window are ignored.
    """
    x, x_hat = _pair(x, x_hat)
    if x.ndim == 3:
        x, x_hat = x[None], x_hat[None]
    if x.ndim != 4:
        raise ShapeError(f"SSIM expects (H, W, C) or (B, H, W, C), got {x.shape}")
    b, h, w, c = x.shape
    k = SSIM_WINDOW
    nh, nw = h // k, w // k
    if nh == 0 or nw == 0:
        raise ShapeError(f"image {h}x{w} smaller than the {k}x{k} SSIM window")

    def windows(a):
        a = a[:, : nh * k, : nw * k].reshape(b, nh, k, nw, k, c)
        return a.transpose(0, 1, 3, 5, 2, 4).reshape(b, nh, nw, c, k * k)

    wx, wy = windows(x), windows(x_hat)
    mx, my = wx.mean(-1), wy.mean(-1)
    vx = wx.var(-1)
    vy = wy.var(-1)
    cov = ((wx - mx[..., None]) * (wy - my[..., None])).mean(-1)
    num = (2 * mx * my + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mx**2 + my**2 + SSIM_C1) * (vx + vy + SSIM_C2)
    return float(np.mean(num / den))


def image_metrics(x, x_hat) -> dict[str, float]:
    """NMSE on the raw [-1, 1] values; PSNR and SSIM after mapping to [0, 1].

    PSNR is averaged per image.
    """
    x, x_hat = _pair(x, x_hat)
    if x.ndim == 3:
        x, x_hat = x[None], x_hat[None]
    ux, uy = to_unit(x), to_unit(np.clip(x_hat, -1.0, 1.0))
    return {
        "nmse": metric_nmse(x, x_hat),
        "psnr": float(np.mean([metric_psnr(a, b) for a, b in zip(ux, uy)])),
        "ssim": metric_ssim(ux, uy),
    }
