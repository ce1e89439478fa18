"""Rectified-flow training with a tapped toy denoiser and a guided Euler sampler.

Latents move along ``z_t = t * z1 + (1 - t) * z0`` from noise (t = 0) to
data (t = 1); the network regresses the constant velocity ``z1 - z0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .alignment import ProjectionHead, alignment_value_and_grad
from .errors import NumericalError, ShapeError, TrainingDivergence
from .numerics.layers import Conv2d, GroupNorm, Linear, SiLU
from .numerics.optim import AdamW
from .numerics.rng import RngState

NUM_CLASSES = 10
NULL_LABEL = NUM_CLASSES
DIVERGENCE_NORM = 1e6
ALIGNMENT_MODES = ("none", "sga", "patchwise")


def sample_timestep_logit_normal(rng: RngState, n: int) -> np.ndarray:
    if n < 1:
        raise ShapeError("need at least one timestep")
    u = rng.normal((n,))
    return 0.5 * (1.0 + np.tanh(0.5 * u))


def _per_sample(t, like):
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        return t
    if t.shape != (like.shape[0],):
        raise ShapeError(f"timesteps {t.shape} do not match batch {like.shape[0]}")
    return t.reshape((-1,) + (1,) * (like.ndim - 1))


def interpolate(z1, z0, t):
    z1, z0 = np.asarray(z1), np.asarray(z0)
    if z1.shape != z0.shape:
        raise ShapeError(f"z1 {z1.shape} and z0 {z0.shape} differ")
    tt = _per_sample(t, z1) if z1.ndim else np.asarray(t, dtype=np.float64)
    return (tt * z1 + (1.0 - tt) * z0).astype(np.result_type(z1, z0), copy=False)


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal features of ``1000 t``, sin half then cos half."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    arg = 1000.0 * np.asarray(t, dtype=np.float64)[:, None] * freqs
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


@dataclass
class FlowBatch:
    z1: np.ndarray
    z0: np.ndarray
    t: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.z1.shape != self.z0.shape:
            raise ShapeError(f"z1 {self.z1.shape} and z0 {self.z0.shape} differ")
        if np.any((self.t < 0) | (self.t > 1)):
            raise ShapeError("timesteps must lie in [0, 1]")


def make_flow_batch(z1, labels, rng: RngState, label_dropout=0.1) -> FlowBatch:
    """Fresh noise, logit-normal times and label dropout to the null class."""
    z1 = np.asarray(z1)
    b = z1.shape[0]
    t = sample_timestep_logit_normal(rng.split(0), b)
    z0 = rng.split(1).normal(z1.shape, dtype=z1.dtype)
    drop = rng.split(2).uniform((b,)) <= label_dropout
    labels = np.where(drop, NULL_LABEL, np.asarray(labels)).astype(np.int64)
    return FlowBatch(z1, z0, t, labels)


class _Block:
    def __init__(self, width, groups, rng, dtype):
        self.gn1 = GroupNorm(width, groups, dtype=dtype)
        self.conv1 = Conv2d(width, width, 3, 1, rng=rng.split(0), dtype=dtype)
        self.gn2 = GroupNorm(width, groups, dtype=dtype)
        self.conv2 = Conv2d(width, width, 3, 1, rng=rng.split(1), gain=0.5, dtype=dtype)
        self.emb = Linear(width, width, rng=rng.split(2), dtype=dtype)
        self.act = SiLU()

    def named(self):
        return {"gn1": self.gn1, "conv1": self.conv1, "gn2": self.gn2, "conv2": self.conv2, "emb": self.emb}

    def forward(self, h, e_act):
        a1 = self.gn1.forward(h)
        a2 = self.act.forward(a1)
        a3 = self.conv1.forward(a2)
        a4 = a3 + self.emb.forward(e_act)[:, None, None, :]
        a5 = self.gn2.forward(a4)
        a6 = self.act.forward(a5)
        out = h + self.conv2.forward(a6)
        return out, (h, a1, a2, a4, a5, a6, e_act)

    def backward(self, cache, dout):
        h, a1, a2, a4, a5, a6, e_act = cache
        g = {}
        d6, g["conv2"] = self.conv2.backward(a6, dout)
        d5 = self.act.backward(a5, d6)[0]
        d4, g["gn2"] = self.gn2.backward(a4, d5)
        de, g["emb"] = self.emb.backward(e_act, d4.sum(axis=(1, 2)))
        d2, g["conv1"] = self.conv1.backward(a2, d4)
        d1 = self.act.backward(a1, d2)[0]
        dh, g["gn1"] = self.gn1.backward(h, d1)
        return dh + dout, de, g


class Denoiser:
    """Residual conv velocity network conditioned on class and time.

    ``e = sinusoid(t) + class_table[label]`` enters every block through its
    own affine map of ``silu(e)``.  The output of block ``tap_index``
    (0-based) is exposed as the alignment hidden state.
    """

    def __init__(self, latent_channels=4, width=64, blocks=6, tap_index=3, *,
                 num_classes=NUM_CLASSES, groups=8, rng: RngState | None = None, dtype=np.float32):
        if not 0 <= tap_index < blocks:
            raise ShapeError(f"tap_index {tap_index} outside [0, {blocks})")
        rng = rng or RngState(0)
        self.latent_channels, self.width, self.tap_index = latent_channels, width, tap_index
        self.num_classes = num_classes
        self.null_label = num_classes
        self.stem = Conv2d(latent_channels, width, 3, 1, rng=rng.split(0), dtype=dtype)
        self.blocks = [_Block(width, groups, rng.split(10 + i), dtype) for i in range(blocks)]
        self.out_norm = GroupNorm(width, groups, dtype=dtype)
        self.out = Conv2d(width, latent_channels, 3, 1, rng=rng.split(1), gain=0.1, dtype=dtype)
        self.class_table = (rng.split(2).normal((num_classes + 1, width)) * 0.5).astype(dtype)
        self.act = SiLU()
        self._params = self._collect()

    def _collect(self):
        p = {f"stem.{k}": v for k, v in self.stem.params.items()}
        for i, blk in enumerate(self.blocks):
            for name, layer in blk.named().items():
                p.update({f"blocks.{i}.{name}.{k}": v for k, v in layer.params.items()})
        p.update({f"out_norm.{k}": v for k, v in self.out_norm.params.items()})
        p.update({f"out.{k}": v for k, v in self.out.params.items()})
        p["class_table"] = self.class_table
        return p

    @property
    def params(self) -> dict[str, np.ndarray]:
        return self._params

    def _embedding(self, t, labels):
        labels = np.asarray(labels, dtype=np.int64)
        if labels.min() < 0 or labels.max() > self.num_classes:
            raise ShapeError(f"labels must lie in [0, {self.num_classes}]")
        e = timestep_embedding(t, self.width) + self.class_table[labels]
        return e.astype(self.class_table.dtype, copy=False)

    def forward(self, z, t, labels):
        """Velocity, tapped hidden state and a cache for :meth:`backward`."""
        z = np.asarray(z)
        if z.ndim != 4 or z.shape[-1] != self.latent_channels:
            raise ShapeError(f"denoiser expects (B, h, w, {self.latent_channels}) latents, got {z.shape}")
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (z.shape[0],))
        e = self._embedding(t, labels)
        e_act = self.act.forward(e)
        h = self.stem.forward(z)
        caches, tap = [], None
        for i, blk in enumerate(self.blocks):
            h_in = h
            h, c = blk.forward(h, e_act)
            caches.append(c)
            if i == self.tap_index:
                tap = h
            del h_in
        o1 = self.out_norm.forward(h)
        o2 = self.act.forward(o1)
        v = self.out.forward(o2)
        return v, tap, (z, labels, e, caches, h, o1, o2)

    def velocity(self, z, t, labels):
        return self.forward(z, t, labels)[0]

    def backward(self, cache, dv, d_tap=None):
        z, labels, e, caches, h, o1, o2 = cache
        grads = {}
        d2, g = self.out.backward(o2, dv)
        grads.update({f"out.{k}": v for k, v in g.items()})
        d1 = self.act.backward(o1, d2)[0]
        dh, g = self.out_norm.backward(h, d1)
        grads.update({f"out_norm.{k}": v for k, v in g.items()})
        de_act = 0.0
        for i in range(len(self.blocks) - 1, -1, -1):
            if i == self.tap_index and d_tap is not None:
                dh = dh + d_tap
            dh, de, g = self.blocks[i].backward(caches[i], dh)
            de_act = de_act + de
            for name, lg in g.items():
                grads.update({f"blocks.{i}.{name}.{k}": v for k, v in lg.items()})
        _, g = self.stem.backward(z, dh, need_dx=False)
        grads.update({f"stem.{k}": v for k, v in g.items()})
        de = self.act.backward(e, de_act)[0]
        table = np.zeros_like(self.class_table, dtype=de.dtype)
        np.add.at(table, labels, de)
        grads["class_table"] = table
        return grads


def flow_matching_value_and_grad(model: Denoiser, batch: FlowBatch):
    """Loss, d loss / d velocity, tapped state and forward cache."""
    zt = interpolate(batch.z1, batch.z0, batch.t)
    v, tap, cache = model.forward(zt, batch.t, batch.labels)
    diff = v - (batch.z1 - batch.z0)
    value = float(np.mean(diff * diff))
    return value, 2.0 * diff / diff.size, tap, cache


def flow_matching_loss(model, batch: FlowBatch):
    """Mean squared velocity error and the tapped hidden state.

    ``model`` only needs a ``forward(z, t, labels) -> (v, tap, cache)``.
    """
    zt = interpolate(batch.z1, batch.z0, batch.t)
    v, tap, _ = model.forward(zt, batch.t, batch.labels)
    target = batch.z1 - batch.z0
    if v.shape != target.shape:
        raise ShapeError(f"velocity {v.shape} does not match latent {target.shape}")
    return float(np.mean((v - target) ** 2)), tap


class DiffusionTrainer:
    """Flow matching plus optional alignment of the projected tap to prior features."""

    def __init__(self, model: Denoiser, *, head: ProjectionHead | None = None, alignment_mode="sga",
                 lambda_s=1.0, lr=1e-6, weight_decay=1e-4):
        if alignment_mode not in ALIGNMENT_MODES:
            raise ValueError(f"alignment_mode must be one of {ALIGNMENT_MODES}")
        if alignment_mode != "none" and head is None:
            raise ValueError(f"alignment_mode {alignment_mode!r} needs a projection head")
        self.model, self.head = model, head
        self.alignment_mode, self.lambda_s = alignment_mode, lambda_s
        params = dict(model.params)
        if head is not None:
            params.update({f"head.{k}": v for k, v in head.params.items()})
        self.opt = AdamW(params, lr=lr, weight_decay=weight_decay)

    def state_tensors(self):
        out = {f"model.{k}": v for k, v in self.model.params.items()}
        if self.head is not None:
            out.update({f"head.{k}": v for k, v in self.head.params.items()})
        out.update(self.opt.state_tensors())
        return out

    def gradients(self, batch: FlowBatch, prior_features=None):
        fm, dv, tap, cache = flow_matching_value_and_grad(self.model, batch)
        losses = {"fm": fm, "align": 0.0}
        d_tap, head_grads = None, {}
        # with lambda_s == 0 the arm is a plain flow-matching run, logged as such
        if self.alignment_mode != "none" and self.lambda_s:
            if prior_features is None:
                raise ValueError("alignment needs prior features")
            feats = self.head.forward(tap)
            align, d_feats = alignment_value_and_grad(self.alignment_mode, feats, prior_features)
            losses["align"] = align
            d_tap, head_grads = self.head.backward(tap, self.lambda_s * d_feats)
        grads = self.model.backward(cache, dv, d_tap)
        grads.update({f"head.{k}": v for k, v in head_grads.items()})
        return losses, grads

    def step(self, batch: FlowBatch, prior_features=None, step=0):
        losses, grads = self.gradients(batch, prior_features)
        for k, v in losses.items():
            if not np.isfinite(v):
                raise TrainingDivergence(k, step)
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise TrainingDivergence(f"grad:{k}", step)
        self.opt.step(grads)
        return losses


def diffusion_train_step(trainer: DiffusionTrainer, batch: FlowBatch, prior_features=None, step=0):
    return trainer.step(batch, prior_features, step)


def euler_sample(model, labels, shape, steps=50, guidance_scale=7.0, rng: RngState | None = None,
                 null_label=None, z0=None):
    """Integrate the guided velocity field from noise at t=0 to t=1.

    ``model`` needs ``velocity(z, t, labels)``; ``shape`` is the per-sample latent shape.
    """
    if steps < 1:
        raise ShapeError("steps must be >= 1")
    labels = np.asarray(labels, dtype=np.int64)
    b = labels.shape[0]
    if z0 is None:
        z0 = (rng or RngState(0)).normal((b, *shape))
    z = np.array(z0, dtype=np.float64)
    if null_label is None:
        null_label = getattr(model, "null_label", NULL_LABEL)
    null = np.full_like(labels, null_label)
    dt = 1.0 / steps
    for i in range(steps):
        t = np.full(b, i * dt)
        v = np.asarray(model.velocity(z, t, labels), dtype=np.float64)
        if guidance_scale != 1.0:
            vu = np.asarray(model.velocity(z, t, null), dtype=np.float64)
            v = vu + guidance_scale * (v - vu)
        z = z + dt * v
        norm = float(np.linalg.norm(z))
        if not np.isfinite(norm) or norm > DIVERGENCE_NORM:
            raise NumericalError(f"sampler diverged at step {i}: |z| = {norm:.3e}")
    return z
