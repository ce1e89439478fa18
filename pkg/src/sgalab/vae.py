"""Toy convolutional VAE with the composite fine-tuning objective.

The generator objective is

    rec + lambda_lpips * perc + lambda_adv * r_adv * g_adv
        + lambda_m * moment + lambda_s * r_sga * sga

where ``r_adv`` and ``r_sga`` are detached gradient-norm ratios measured at
the last decoder and last encoder convolution respectively.  All backward
passes are explicit; nothing here depends on an autodiff engine.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .alignment import ProjectionHead, sga_value_and_grad
from .errors import ShapeError, TrainingDivergence
from .numerics.layers import Conv2d, Sequential, SiLU, UpsampleNearest
from .numerics.optim import AdamW
from .numerics.rng import RngState

LOG_VAR_MIN, LOG_VAR_MAX = -30.0, 20.0
RATIO_EPS = 1e-8
RATIO_MAX = 1e4


@dataclass
class LatentMoments:
    mu: np.ndarray
    log_var: np.ndarray


@dataclass
class VaeWeights:
    lambda_m: float = 1.0
    lambda_s: float = 1.0
    lambda_lpips: float = 0.1
    lambda_adv: float = 0.05
    adv_warmup: float = 0.2


def _check_same(a, b, what):
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"{what}: shapes differ, {np.shape(a)} vs {np.shape(b)}")


class Vae:
    """Encoder to ``2c`` moment channels and a nearest-upsampling decoder.

    ``compression`` (4 or 8) is the spatial downsampling factor.
    """

    def __init__(self, latent_channels=4, compression=4, width=32, *,
                 rng: RngState | None = None, dtype=np.float32):
        if compression not in (4, 8):
            raise ShapeError(f"compression must be 4 or 8, got {compression}")
        rng = rng or RngState(0)
        c, w = latent_channels, width
        self.latent_channels, self.compression, self.width = c, compression, width
        stages = compression.bit_length() - 1
        enc = [Conv2d(3, w // 2, 3, 2, rng=rng.split(0), dtype=dtype), SiLU(),
               Conv2d(w // 2, w, 3, 2, rng=rng.split(1), dtype=dtype), SiLU()]
        if stages == 3:
            enc += [Conv2d(w, w, 3, 2, rng=rng.split(2), dtype=dtype), SiLU()]
        enc += [Conv2d(w, w, 3, 1, rng=rng.split(3), dtype=dtype), SiLU(),
                Conv2d(w, 2 * c, 3, 1, rng=rng.split(4), gain=0.5, dtype=dtype)]
        dec = [Conv2d(c, w, 3, 1, rng=rng.split(10), dtype=dtype), SiLU()]
        for i in range(stages):
            dec += [UpsampleNearest(2), Conv2d(w, w, 3, 1, rng=rng.split(11 + i), dtype=dtype), SiLU()]
        dec += [Conv2d(w, 3, 3, 1, rng=rng.split(20), gain=0.5, dtype=dtype)]
        self.encoder = Sequential(enc)
        self.decoder = Sequential(dec)

    @property
    def params(self) -> dict[str, np.ndarray]:
        out = {f"enc.{k}": v for k, v in self.encoder.params.items()}
        out.update({f"dec.{k}": v for k, v in self.decoder.params.items()})
        return out

    @property
    def encoder_params(self):
        return {f"enc.{k}": v for k, v in self.encoder.params.items()}

    @property
    def encoder_anchor(self) -> str:
        return f"enc.{len(self.encoder) - 1}.w"

    @property
    def decoder_anchor(self) -> str:
        return f"dec.{len(self.decoder) - 1}.w"

    def latent_shape(self, image_hw):
        h, w = image_hw
        return h // self.compression, w // self.compression, self.latent_channels

    def _check_image(self, x):
        if x.ndim != 4 or x.shape[-1] != 3:
            raise ShapeError(f"VAE expects (B, H, W, 3) images, got {x.shape}")
        f = self.compression
        if x.shape[1] % f or x.shape[2] % f:
            raise ShapeError(f"image size {x.shape[1:3]} not divisible by {f}")

    def moments_cached(self, x):
        x = np.asarray(x)
        self._check_image(x)
        out, inputs = self.encoder.forward_cached(x)
        c = self.latent_channels
        raw = out[..., c:]
        return LatentMoments(out[..., :c], np.clip(raw, LOG_VAR_MIN, LOG_VAR_MAX)), (inputs, raw)

    def moments(self, x) -> LatentMoments:
        return self.moments_cached(x)[0]

    def encode(self, x, rng: RngState):
        """Moments and a reparameterized sample ``mu + exp(log_var / 2) * eps``."""
        m = self.moments(x)
        eps = rng.normal(m.mu.shape, dtype=m.mu.dtype)
        return m, reparameterize(m, eps)

    def decode(self, z):
        z = np.asarray(z)
        if z.ndim != 4 or z.shape[-1] != self.latent_channels:
            raise ShapeError(f"decoder expects (B, h, w, {self.latent_channels}) latents, got {z.shape}")
        return self.decoder.forward(z)

    def reconstruct(self, x):
        return self.decode(self.moments(x).mu)

    def encoder_backward(self, cache, d_mu, d_log_var):
        inputs, raw = cache
        inside = (raw >= LOG_VAR_MIN) & (raw <= LOG_VAR_MAX)
        d_out = np.concatenate([d_mu, d_log_var * inside], axis=-1)
        _, grads = self.encoder.backward_cached(inputs, d_out, need_input_grad=False)
        return {f"enc.{k}": v for k, v in grads.items()}

    def encoder_anchor_grad(self, cache, d_mu, d_log_var):
        inputs, raw = cache
        inside = (raw >= LOG_VAR_MIN) & (raw <= LOG_VAR_MAX)
        d_out = np.concatenate([d_mu, d_log_var * inside], axis=-1)
        return self.encoder.layers[-1].weight_grad(inputs[-1], d_out)

    def frozen_copy(self) -> Vae:
        dup = copy.deepcopy(self)
        for v in dup.params.values():
            v.setflags(write=False)
        return dup


def reparameterize(m: LatentMoments, eps):
    return m.mu + np.exp(0.5 * m.log_var) * eps


def _reparam_backward(m: LatentMoments, eps, dz):
    return dz, dz * eps * 0.5 * np.exp(0.5 * m.log_var)


def moment_loss(m: LatentMoments, m_star: LatentMoments) -> float:
    return moment_value_and_grad(m, m_star)[0]


def moment_value_and_grad(m: LatentMoments, m_star: LatentMoments):
    """Batch mean of squared L2 distances of means and log-variances, summed over coordinates.

    Returns ``(value, d_mu, d_log_var)``.
    """
    _check_same(m.mu, m_star.mu, "moment_loss mu")
    _check_same(m.log_var, m_star.log_var, "moment_loss log_var")
    b = m.mu.shape[0]
    dm = m.mu - m_star.mu
    dv = m.log_var - m_star.log_var
    value = float((np.sum(dm * dm) + np.sum(dv * dv)) / b)
    return value, 2.0 * dm / b, 2.0 * dv / b


def reconstruction_loss(x, x_hat) -> float:
    return reconstruction_value_and_grad(x, x_hat)[0]


def reconstruction_value_and_grad(x, x_hat):
    """Mean absolute error and its (sub)gradient w.r.t. ``x_hat``."""
    _check_same(x, x_hat, "reconstruction_loss")
    d = np.asarray(x_hat) - np.asarray(x)
    return float(np.mean(np.abs(d))), np.sign(d) / d.size


class PerceptualProxy:
    """Frozen seeded conv stack standing in for a learned perceptual metric.

    The loss is the sum of feature MSEs taken after the second and third
    convolutions.
    """

    def __init__(self, seed: int = 7, dtype=np.float32):
        rng = RngState(seed)
        self.net = Sequential([
            Conv2d(3, 8, 3, 1, rng=rng.split(0), dtype=dtype), SiLU(),
            Conv2d(8, 16, 3, 2, rng=rng.split(1), dtype=dtype), SiLU(),
            Conv2d(16, 16, 3, 2, rng=rng.split(2), dtype=dtype), SiLU(),
        ])
        self.taps = (3, 5)
        for v in self.net.params.values():
            v.setflags(write=False)

    def features(self, x):
        feats, inputs = [], []
        for i, layer in enumerate(self.net.layers):
            inputs.append(x)
            x = layer.forward(x)
            if i in self.taps:
                feats.append(x)
        return feats, inputs

    def value_and_grad(self, x, x_hat):
        _check_same(x, x_hat, "perceptual_proxy_loss")
        fx, _ = self.features(np.asarray(x))
        fy, inputs = self.features(np.asarray(x_hat))
        value = 0.0
        d_at = {}
        for tap, a, b in zip(self.taps, fx, fy):
            diff = b - a
            value += float(np.mean(diff * diff))
            d_at[tap] = 2.0 * diff / diff.size
        dy = None
        for i in range(len(self.net.layers) - 1, -1, -1):
            if i in d_at:
                dy = d_at[i] if dy is None else dy + d_at[i]
            dy, _ = self.net.layers[i].backward(inputs[i], dy)
        return value, dy

    def loss(self, x, x_hat) -> float:
        _check_same(x, x_hat, "perceptual_proxy_loss")
        fx, _ = self.features(np.asarray(x))
        fy, _ = self.features(np.asarray(x_hat))
        return float(sum(np.mean((b - a) ** 2) for a, b in zip(fx, fy)))


def perceptual_proxy_loss(x, x_hat, proxy: PerceptualProxy) -> float:
    return proxy.loss(x, x_hat)


class Discriminator:
    """Patch discriminator: strided convs down to a one-channel logit map."""

    def __init__(self, width=32, *, rng: RngState | None = None, dtype=np.float32):
        rng = rng or RngState(1)
        w = width
        self.net = Sequential([
            Conv2d(3, w // 2, 3, 2, rng=rng.split(0), dtype=dtype), SiLU(),
            Conv2d(w // 2, w, 3, 2, rng=rng.split(1), dtype=dtype), SiLU(),
            Conv2d(w, 1, 3, 1, rng=rng.split(2), gain=0.5, dtype=dtype),
        ])

    @property
    def params(self):
        return {f"disc.{k}": v for k, v in self.net.params.items()}

    def forward(self, x):
        return self.net.forward(x)

    __call__ = forward

    def backward(self, x, d_logits, need_input_grad=True):
        _, inputs = self.net.forward_cached(x)
        dx, grads = self.net.backward_cached(inputs, d_logits, need_input_grad)
        return dx, {f"disc.{k}": v for k, v in grads.items()}


def adversarial_losses(d, x_real, x_fake):
    """Hinge discriminator loss and non-saturating generator loss.

    ``d`` is any callable returning logits.
    """
    _check_same(x_real, x_fake, "adversarial_losses")
    real, fake = d(x_real), d(x_fake)
    d_loss = float(np.mean(np.maximum(1.0 - real, 0.0)) + np.mean(np.maximum(1.0 + fake, 0.0)))
    g_loss = float(-np.mean(fake))
    return d_loss, g_loss


def generator_adv_value_and_grad(d: Discriminator, x_fake):
    logits = d.forward(x_fake)
    value = float(-np.mean(logits))
    dx, _ = d.backward(x_fake, np.full_like(logits, -1.0 / logits.size))
    return value, dx


def discriminator_value_and_grad(d: Discriminator, x_real, x_fake):
    real, fake = d.forward(x_real), d.forward(x_fake)
    value = float(np.mean(np.maximum(1.0 - real, 0.0)) + np.mean(np.maximum(1.0 + fake, 0.0)))
    d_real = -(real < 1.0).astype(real.dtype) / real.size
    d_fake = (fake > -1.0).astype(fake.dtype) / fake.size
    _, g_real = d.backward(x_real, d_real, need_input_grad=False)
    _, g_fake = d.backward(x_fake, d_fake, need_input_grad=False)
    return value, {k: g_real[k] + g_fake[k] for k in g_real}


def grad_norm_ratio(num_grad, den_grad) -> float:
    """``||num|| / (||den|| + 1e-8)`` clamped to ``[0, 1e4]``; a plain float, so no gradient flows."""
    num = float(np.linalg.norm(np.asarray(num_grad, dtype=np.float64)))
    den = float(np.linalg.norm(np.asarray(den_grad, dtype=np.float64)))
    return min(max(num / (den + RATIO_EPS), 0.0), RATIO_MAX)


def _finite(name, value, step):
    if not np.isfinite(value):
        raise TrainingDivergence(name, step)


class VaeTrainer:
    """Holds the VAE, discriminator, projection head and their optimizers.

    ``reference`` is the frozen encoder whose moments anchor the latent
    space; it is usually the pre-trained starting point of ``vae``.
    """

    def __init__(self, vae: Vae, *, weights: VaeWeights | None = None, head: ProjectionHead | None = None,
                 disc: Discriminator | None = None, proxy: PerceptualProxy | None = None,
                 reference: Vae | None = None, lr=1e-5, weight_decay=1e-4, disc_lr=None):
        self.vae = vae
        self.weights = weights or VaeWeights()
        self.head = head
        self.disc = disc
        self.proxy = proxy or PerceptualProxy()
        self.reference = reference
        gen = dict(vae.params)
        if head is not None:
            gen.update({f"head.{k}": v for k, v in head.params.items()})
        self.opt = AdamW(gen, lr=lr, weight_decay=weight_decay)
        self.disc_opt = None
        if disc is not None:
            self.disc_opt = AdamW(disc.params, lr=lr if disc_lr is None else disc_lr, weight_decay=weight_decay)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = dict(self.vae.params)
        if self.head is not None:
            out.update({f"head.{k}": v for k, v in self.head.params.items()})
        if self.disc is not None:
            out.update(self.disc.params)
        out.update(self.opt.state_tensors())
        if self.disc_opt is not None:
            out.update(self.disc_opt.state_tensors("disc_opt."))
        return out

    def step(self, x, rng: RngState, *, prior_features=None, step=0, total_steps=1):
        """One update; returns the component losses and the applied weights."""
        w = self.weights
        vae = self.vae
        x = np.asarray(x)
        m, enc_cache = vae.moments_cached(x)
        eps = rng.normal(m.mu.shape, dtype=m.mu.dtype)
        z = reparameterize(m, eps)
        x_hat, dec_inputs = vae.decoder.forward_cached(z)
        losses = {}

        adv_on = self.disc is not None and w.lambda_adv > 0
        if adv_on:
            # discriminator first, then the generator sees the updated critic
            d_val, d_grads = discriminator_value_and_grad(self.disc, x, x_hat)
            _finite("d_adv", d_val, step)
            self.disc_opt.step(d_grads)
            losses["d_adv"] = d_val

        rec, d_rec = reconstruction_value_and_grad(x, x_hat)
        perc, d_perc = self.proxy.value_and_grad(x, x_hat)
        losses["rec"], losses["perc"] = rec, perc
        d_xhat = d_rec + w.lambda_lpips * d_perc

        adv_weight = 0.0
        losses["adv"] = 0.0
        if adv_on:
            g_adv, d_gadv = generator_adv_value_and_grad(self.disc, x_hat)
            losses["adv"] = g_adv
            if step >= w.adv_warmup * total_steps:
                last = vae.decoder.layers[-1]
                ratio = grad_norm_ratio(last.weight_grad(dec_inputs[-1], d_perc),
                                        last.weight_grad(dec_inputs[-1], d_gadv))
                adv_weight = w.lambda_adv * ratio
                d_xhat = d_xhat + adv_weight * d_gadv
        losses["adv_weight"] = adv_weight

        dz, dec_grads = vae.decoder.backward_cached(dec_inputs, d_xhat)
        d_mu, d_lv = _reparam_backward(m, eps, dz)

        moment, dm_mu, dm_lv = 0.0, 0.0, 0.0
        if self.reference is not None:
            m_star = self.reference.moments(x)
            moment, dm_mu, dm_lv = moment_value_and_grad(m, m_star)
        losses["moment"] = moment
        d_mu = d_mu + w.lambda_m * dm_mu
        d_lv = d_lv + w.lambda_m * dm_lv

        sga_weight = 0.0
        losses["sga"] = 0.0
        head_grads = {}
        if self.head is not None and prior_features is not None:
            feats = self.head.forward(z)
            sga, d_feats = sga_value_and_grad(feats, prior_features)
            losses["sga"] = sga
            if w.lambda_s > 0:
                dz_s, head_grads = self.head.backward(z, d_feats)
                ds_mu, ds_lv = _reparam_backward(m, eps, dz_s)
                if self.reference is not None:
                    ratio = grad_norm_ratio(vae.encoder_anchor_grad(enc_cache, dm_mu, dm_lv),
                                            vae.encoder_anchor_grad(enc_cache, ds_mu, ds_lv))
                else:
                    ratio = 1.0
                sga_weight = w.lambda_s * ratio
                d_mu = d_mu + sga_weight * ds_mu
                d_lv = d_lv + sga_weight * ds_lv
        losses["sga_weight"] = sga_weight

        for name in ("rec", "perc", "adv", "moment", "sga"):
            _finite(name, losses[name], step)

        grads = vae.encoder_backward(enc_cache, d_mu, d_lv)
        grads.update({f"dec.{k}": v for k, v in dec_grads.items()})
        grads.update({f"head.{k}": sga_weight * v for k, v in head_grads.items()})
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise TrainingDivergence(f"grad:{k}", step)
        self.opt.step(grads)
        return losses


def vae_train_step(trainer: VaeTrainer, x, rng: RngState, prior_features=None, step=0, total_steps=1):
    return trainer.step(x, rng, prior_features=prior_features, step=step, total_steps=total_steps)
