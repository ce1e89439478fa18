"""Closed layer vocabulary with explicit forward/backward.

Tensors are plain numpy arrays in channel-last layout: images and feature
maps are ``(batch, height, width, channels)``.  Every layer is stateless
between calls: ``backward(x, dy)`` recomputes whatever it needs from the
forward input ``x`` and returns ``(dx, grads)`` where ``grads`` has the
same keys and shapes as ``params``.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError
from .rng import RngState


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}

    def forward(self, x):
        raise NotImplementedError

    def backward(self, x, dy):
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)

    def __repr__(self):
        return f"{type(self).__name__}()"


def _check_rank4(x, who):
    if x.ndim != 4:
        raise ShapeError(f"{who} expects (B, H, W, C) input, got shape {x.shape}")


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, c_in, c_out, kernel=3, stride=1, padding=None, *,
                 rng: RngState | None = None, gain=1.0, dtype=np.float32, bias=True,
                 pad_mode="zeros"):
        super().__init__()
        if pad_mode not in ("zeros", "edge"):
            raise ValueError(f"unknown pad_mode {pad_mode!r}")
        self.pad_mode = pad_mode
        self.c_in, self.c_out = c_in, c_out
        self.kernel, self.stride = kernel, stride
        self.padding = kernel // 2 if padding is None else padding
        std = gain * math.sqrt(2.0 / (kernel * kernel * c_in))
        shape = (kernel, kernel, c_in, c_out)
        if rng is None:
            w = np.zeros(shape)
        else:
            w = rng.normal(shape) * std
        self.params["w"] = w.astype(dtype)
        if bias:
            self.params["b"] = np.zeros(c_out, dtype=dtype)

    def __repr__(self):
        return (f"Conv2d({self.c_in}->{self.c_out}, k={self.kernel}, "
                f"s={self.stride}, p={self.padding})")

    def out_size(self, h, w):
        k, s, p = self.kernel, self.stride, self.padding
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def _cols(self, x):
        _check_rank4(x, "conv2d")
        if x.shape[-1] != self.c_in:
            raise ShapeError(f"conv2d expects {self.c_in} input channels, got {x.shape[-1]}")
        k, s, p = self.kernel, self.stride, self.padding
        b, h, w, c = x.shape
        ho, wo = self.out_size(h, w)
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv2d input {h}x{w} too small for kernel {k}")
        if p:
            mode = "constant" if self.pad_mode == "zeros" else "edge"
            xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)), mode=mode)
        else:
            xp = x
        win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, : s * (ho - 1) + 1 : s, : s * (wo - 1) + 1 : s]
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(b * ho * wo, k * k * c)
        return cols, (b, ho, wo)

    def forward(self, x):
        cols, (b, ho, wo) = self._cols(x)
        y = cols @ self.params["w"].reshape(-1, self.c_out)
        if "b" in self.params:
            y += self.params["b"]
        return y.reshape(b, ho, wo, self.c_out)

    def weight_grad(self, x, dy):
        """Gradient of the kernel alone, skipping the input gradient."""
        cols, _ = self._cols(x)
        return (cols.T @ dy.reshape(-1, self.c_out)).reshape(self.params["w"].shape)

    def backward(self, x, dy, need_dx=True):
        k, s, p = self.kernel, self.stride, self.padding
        cols, (b, ho, wo) = self._cols(x)
        dy2 = dy.reshape(-1, self.c_out)
        grads = {"w": (cols.T @ dy2).reshape(self.params["w"].shape)}
        if "b" in self.params:
            grads["b"] = dy2.sum(axis=0)
        if not need_dx:
            return None, grads
        _, h, w, c = x.shape
        if s == 1 and self.pad_mode == "zeros" and p <= k - 1:
            # stride 1: input gradient is a full convolution with the flipped kernel
            q = k - 1 - p
            dyp = np.pad(dy, ((0, 0), (q, q), (q, q), (0, 0))) if q else dy
            win = sliding_window_view(dyp, (k, k), axis=(1, 2))
            dcols = win.transpose(0, 1, 2, 4, 5, 3).reshape(b * h * w, k * k * self.c_out)
            wf = self.params["w"][::-1, ::-1].transpose(0, 1, 3, 2).reshape(-1, self.c_in)
            return (dcols @ wf).reshape(b, h, w, c), grads
        dcols = (dy2 @ self.params["w"].reshape(-1, self.c_out).T).reshape(b, ho, wo, k, k, self.c_in)
        dxp = np.zeros((b, h + 2 * p, w + 2 * p, c), dtype=dcols.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s, :] += dcols[:, :, :, i, j, :]
        if p and self.pad_mode == "edge":
            # replicated border pixels fold their gradient back onto the edge
            dxp[:, p, :, :] += dxp[:, :p, :, :].sum(axis=1)
            dxp[:, p + h - 1, :, :] += dxp[:, p + h :, :, :].sum(axis=1)
            dxp[:, :, p, :] += dxp[:, :, :p, :].sum(axis=2)
            dxp[:, :, p + w - 1, :] += dxp[:, :, p + w :, :].sum(axis=2)
        dx = dxp[:, p : p + h, p : p + w, :] if p else dxp
        return dx, grads


class Linear(Layer):
    """Affine map on the last axis."""

    kind = "linear"

    def __init__(self, d_in, d_out, *, rng: RngState | None = None, gain=1.0, dtype=np.float32):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        std = gain * math.sqrt(1.0 / d_in)
        w = np.zeros((d_in, d_out)) if rng is None else rng.normal((d_in, d_out)) * std
        self.params["w"] = w.astype(dtype)
        self.params["b"] = np.zeros(d_out, dtype=dtype)

    def __repr__(self):
        return f"Linear({self.d_in}->{self.d_out})"

    def forward(self, x):
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"linear expects last dim {self.d_in}, got {x.shape}")
        return x @ self.params["w"] + self.params["b"]

    def backward(self, x, dy):
        x2 = x.reshape(-1, self.d_in)
        dy2 = dy.reshape(-1, self.d_out)
        grads = {"w": x2.T @ dy2, "b": dy2.sum(axis=0)}
        return dy @ self.params["w"].T, grads


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        return np.maximum(x, 0)

    def backward(self, x, dy):
        return dy * (x > 0), {}


def _sigmoid(x):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class SiLU(Layer):
    kind = "silu"

    def forward(self, x):
        return x * _sigmoid(x)

    def backward(self, x, dy):
        sg = _sigmoid(x)
        return dy * sg * (1 + x * (1 - sg)), {}


class GroupNorm(Layer):
    kind = "group_norm"

    def __init__(self, channels, groups, eps=1e-5, dtype=np.float32):
        super().__init__()
        if channels % groups:
            raise ShapeError(f"{channels} channels not divisible into {groups} groups")
        self.channels, self.groups, self.eps = channels, groups, eps
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)

    def __repr__(self):
        return f"GroupNorm({self.channels}, groups={self.groups})"

    def _group_mean(self, per_channel, m):
        # (B, C) channel sums -> (B, C) group means broadcast back to channels
        b, c = per_channel.shape
        g = per_channel.reshape(b, self.groups, c // self.groups).sum(axis=-1) / m
        return np.repeat(g, c // self.groups, axis=1)

    def _normalize(self, x):
        _check_rank4(x, "group_norm")
        b, h, w, c = x.shape
        if c != self.channels:
            raise ShapeError(f"group_norm expects {self.channels} channels, got {c}")
        m = h * w * (c // self.groups)
        x3 = x.reshape(b, h * w, c)
        mu = self._group_mean(x3.sum(axis=1), m)
        xc = x3 - mu[:, None, :]
        var = self._group_mean((xc * xc).sum(axis=1), m)
        inv = 1.0 / np.sqrt(var + self.eps)
        return xc * inv[:, None, :], inv, m

    def forward(self, x):
        xhat, _, _ = self._normalize(x)
        return xhat.reshape(x.shape) * self.params["gamma"] + self.params["beta"]

    def backward(self, x, dy):
        xhat, inv, m = self._normalize(x)
        b, h, w, c = x.shape
        dy3 = dy.reshape(b, h * w, c)
        grads = {
            "gamma": (dy3 * xhat).sum(axis=(0, 1)),
            "beta": dy3.sum(axis=(0, 1)),
        }
        dxhat = dy3 * self.params["gamma"]
        s1 = self._group_mean(dxhat.sum(axis=1), m)
        s2 = self._group_mean((dxhat * xhat).sum(axis=1), m)
        dx = inv[:, None, :] * (dxhat - s1[:, None, :] - xhat * s2[:, None, :])
        return dx.reshape(x.shape), grads


def pool_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Row i averages input positions [floor(i*n_in/n_out), ceil((i+1)*n_in/n_out))."""
    if not 1 <= n_out <= n_in:
        raise ShapeError(f"adaptive pooling target {n_out} must lie in [1, {n_in}]")
    m = np.zeros((n_out, n_in), dtype=dtype)
    for i in range(n_out):
        lo = (i * n_in) // n_out
        hi = -((-(i + 1) * n_in) // n_out)
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def adaptive_avg_pool(x, target):
    """Adaptive average pooling of a ``(h, w, c)`` map or ``(B, h, w, c)`` batch."""
    x = np.asarray(x)
    single = x.ndim == 3
    xb = x[None] if single else x
    _check_rank4(xb, "adaptive_avg_pool")
    n_h, n_w = target
    ph = pool_matrix(xb.shape[1], n_h, x.dtype)
    pw = pool_matrix(xb.shape[2], n_w, x.dtype)
    y = np.einsum("ih,bhwc,jw->bijc", ph, xb, pw, optimize=True)
    return y[0] if single else y


class AdaptiveAvgPool(Layer):
    kind = "avg_pool"

    def __init__(self, target):
        super().__init__()
        self.target = tuple(target)

    def __repr__(self):
        return f"AdaptiveAvgPool{self.target}"

    def forward(self, x):
        return adaptive_avg_pool(x, self.target)

    def backward(self, x, dy):
        ph = pool_matrix(x.shape[1], self.target[0], dy.dtype)
        pw = pool_matrix(x.shape[2], self.target[1], dy.dtype)
        return np.einsum("ih,bijc,jw->bhwc", ph, dy, pw, optimize=True), {}


class UpsampleNearest(Layer):
    kind = "upsample_nearest"

    def __init__(self, factor=2):
        super().__init__()
        self.factor = factor

    def __repr__(self):
        return f"UpsampleNearest(x{self.factor})"

    def forward(self, x):
        _check_rank4(x, "upsample_nearest")
        f = self.factor
        return x.repeat(f, axis=1).repeat(f, axis=2)

    def backward(self, x, dy):
        b, h, w, c = x.shape
        f = self.factor
        return dy.reshape(b, h, f, w, f, c).sum(axis=(2, 4)), {}


class FlattenToPatches(Layer):
    """(B, h, w, C) -> (B, h*w, C), row-major over the grid."""

    kind = "flatten_to_patches"

    def forward(self, x):
        _check_rank4(x, "flatten_to_patches")
        b, h, w, c = x.shape
        return x.reshape(b, h * w, c)

    def backward(self, x, dy):
        return dy.reshape(x.shape), {}


class Sequential(Layer):
    kind = "sequential"

    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)
        for i, layer in enumerate(self.layers):
            for k, v in layer.params.items():
                self.params[f"{i}.{k}"] = v

    def __repr__(self):
        return "Sequential(" + ", ".join(map(repr, self.layers)) + ")"

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, i):
        return self.layers[i]

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def forward_cached(self, x):
        """Output plus the input of every layer (needed by ``backward_cached``)."""
        inputs = []
        for layer in self.layers:
            inputs.append(x)
            x = layer.forward(x)
        return x, inputs

    def backward_cached(self, inputs, dy, need_input_grad=True):
        grads = {}
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            if i == 0 and not need_input_grad and isinstance(layer, Conv2d):
                dy, g = layer.backward(inputs[i], dy, need_dx=False)
            else:
                dy, g = layer.backward(inputs[i], dy)
            for k, v in g.items():
                grads[f"{i}.{k}"] = v
        return dy, grads

    def backward(self, x, dy):
        _, inputs = self.forward_cached(x)
        return self.backward_cached(inputs, dy)


def layer_forward(layer: Layer, x):
    return layer.forward(x)


def layer_backward(layer: Layer, x, upstream):
    return layer.backward(x, upstream)


def prefixed(params: dict, prefix: str) -> dict:
    return {f"{prefix}.{k}": v for k, v in params.items()}
