"""Two-stage training driver, evaluation and the alignment-conflict experiment.

Everything a run writes lives in its run directory:

    config.txt                   resolved configuration
    vae_pretrain.ckpt            reference VAE (no alignment, no anchoring)
    vae.ckpt                     stage-1 fine-tuned VAE
    diffusion_pretrain.ckpt      baseline denoiser (no alignment)
    diffusion.ckpt               stage-2 fine-tuned denoiser
    metrics_*.csv, eval_*.csv    per-step and held-out logs
    conflict/                    per-arm logs and the verdict report
"""

from __future__ import annotations

import os
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..alignment import ProjectionHead
from ..errors import ConfigError, ContractError, TrainingDivergence
from ..flow import (
    DiffusionTrainer, Denoiser, FlowBatch, euler_sample, flow_matching_value_and_grad,
    interpolate, make_flow_batch, sample_timestep_logit_normal,
)
from ..numerics.rng import RngState
from ..prior import FoundationPrior
from ..vae import Discriminator, Vae, VaeTrainer, VaeWeights
from .checkpoint import load_checkpoint, load_into, save_checkpoint, tensors_checksum
from .config import RunConfig, dump_config, run_dir
from .data import generate_dataset, holdout_mask
from .metrics import image_metrics

METRICS_HEADER = ("step", "loss_rec", "loss_perc", "loss_adv", "loss_moment", "loss_sga",
                  "loss_fm", "nmse", "psnr", "ssim", "wall_seconds")
EVAL_HEADER = ("step", "heldout_fm", "psnr", "ssim")
FLOAT32 = np.float32

# RNG stream keys, one per consumer
K_VAE_INIT, K_VAE_PRE, K_VAE_FT, K_HEAD_VAE = 1, 2, 3, 4
K_DIFF_INIT, K_DIFF_PRE, K_DIFF_FT, K_HEAD_DIFF = 11, 12, 13, 14
K_EVAL, K_SAMPLE, K_CONFLICT = 21, 22, 23


def _fmt(v) -> str:
    if v is None or v == "":
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".9g")


class CsvLog:
    def __init__(self, path, header):
        self.path = Path(path)
        self.header = header
        self.path.write_text(",".join(header) + "\n")

    def write(self, row: dict):
        unknown = set(row) - set(self.header)
        if unknown:
            raise KeyError(f"unknown CSV columns {sorted(unknown)}")
        with self.path.open("a") as fh:
            fh.write(",".join(_fmt(row.get(k)) for k in self.header) + "\n")


@contextmanager
def run_lock(directory: Path):
    """Exclusive ownership of a run directory for the duration of a command."""
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / "lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(f"run directory {directory} is locked by another process "
                          f"(remove {lock} if that process is gone)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield directory
    finally:
        lock.unlink(missing_ok=True)


class Workspace:
    """Dataset, prior and paths shared by every stage of one configuration."""

    def __init__(self, cfg: RunConfig, directory=None):
        self.cfg = cfg.validate()
        self.dir = Path(directory) if directory is not None else run_dir(cfg)
        self.dir.mkdir(parents=True, exist_ok=True)
        (self.dir / "config.txt").write_text(dump_config(cfg))
        self._data = None
        self._prior_feats = None
        self.prior = FoundationPrior(cfg.prior.seed, cfg.prior.channels, cfg.patch_grid())
        self.clock = time.perf_counter()

    @property
    def data(self):
        if self._data is None:
            ds = generate_dataset(self.cfg.seed, self.cfg.data.size, self.cfg.image_size)
            hold = holdout_mask(len(ds), self.cfg.data.holdout)
            if hold.all() or not hold.any():
                raise ConfigError("data.size too small for a non-empty train/held-out split")
            self._data = ds
            self.images = ds.images.astype(FLOAT32)
            self.train_idx = np.flatnonzero(~hold)
            self.hold_idx = np.flatnonzero(hold)
        return self._data

    @property
    def prior_features(self) -> np.ndarray:
        """``(n_images, N, C_f)`` prior features, computed once."""
        if self._prior_feats is None:
            self.data
            chunks = [self.prior.extract_features(self.images[i : i + 64])
                      for i in range(0, len(self.images), 64)]
            self._prior_feats = np.concatenate(chunks)
        return self._prior_feats

    def path(self, name) -> Path:
        return self.dir / name

    def wall(self):
        return time.perf_counter() - self.clock if self.cfg.log.wall_clock else 0.0

    def batch_indices(self, rng: RngState, batch_size):
        self.data
        return self.train_idx[rng.integers(len(self.train_idx), (batch_size,))]


# ---------------------------------------------------------------- stage 1

def build_vae(cfg: RunConfig) -> Vae:
    v = cfg.vae
    return Vae(v.channels, v.compression, v.width, rng=RngState(cfg.seed).split(K_VAE_INIT))


def build_disc(cfg: RunConfig) -> Discriminator:
    return Discriminator(cfg.vae.disc_width, rng=RngState(cfg.seed).split(K_VAE_INIT).split(99))


def build_vae_head(cfg: RunConfig) -> ProjectionHead:
    return ProjectionHead(cfg.vae.channels, cfg.prior.channels, 1, cfg.patch_grid(),
                          rng=RngState(cfg.seed).split(K_HEAD_VAE))


def evaluate_vae(ws: Workspace, vae: Vae) -> dict[str, float]:
    ws.data
    x = ws.images[ws.hold_idx]
    rec = np.concatenate([vae.reconstruct(x[i : i + 64]) for i in range(0, len(x), 64)])
    return image_metrics(x, rec)


def _vae_loop(ws: Workspace, trainer: VaeTrainer, steps, stream_key, csv_name, ckpt_name, extra_tensors):
    cfg = ws.cfg
    log = CsvLog(ws.path(f"metrics_{csv_name}.csv"), METRICS_HEADER)
    use_prior = trainer.head is not None
    rng = RngState(cfg.seed).split(stream_key)

    def save():
        save_checkpoint(ws.path(ckpt_name), {**trainer.state_tensors(), **extra_tensors})

    save()
    for step in range(1, steps + 1):
        srng = rng.split(step)
        idx = ws.batch_indices(srng.split(0), cfg.vae.batch_size)
        feats = ws.prior_features[idx] if use_prior else None
        losses = trainer.step(ws.images[idx], srng.split(1), prior_features=feats,
                              step=step - 1, total_steps=steps)
        row = {"step": step, "loss_rec": losses["rec"], "loss_perc": losses["perc"],
               "loss_adv": losses["adv"], "loss_moment": losses["moment"], "loss_sga": losses["sga"]}
        if step % cfg.log.eval_every == 0 or step == steps:
            row.update(evaluate_vae(ws, trainer.vae))
        if step % cfg.log.every == 0 or "psnr" in row:
            row["wall_seconds"] = ws.wall()
            log.write(row)
        if step % cfg.log.checkpoint_every == 0 or step == steps:
            save()
    return ws.path(ckpt_name)


def pretrain_vae(ws: Workspace) -> Path:
    """Reference VAE: reconstruction, perceptual and adversarial terms only."""
    cfg = ws.cfg
    vae = build_vae(cfg)
    w = VaeWeights(lambda_m=0.0, lambda_s=0.0, lambda_lpips=cfg.vae.lambda_lpips,
                   lambda_adv=cfg.vae.lambda_adv, adv_warmup=cfg.vae.adv_warmup)
    trainer = VaeTrainer(vae, weights=w, disc=build_disc(cfg), lr=cfg.vae.pretrain_lr,
                         weight_decay=cfg.vae.weight_decay)
    return _vae_loop(ws, trainer, cfg.vae.pretrain_steps, K_VAE_PRE, "vae_pretrain",
                     "vae_pretrain.ckpt", ws.prior.state_tensors())


def load_vae(cfg: RunConfig, path) -> Vae:
    vae = build_vae(cfg)
    load_into(vae.params, load_checkpoint(path))
    return vae


def run_stage1(cfg: RunConfig, ws: Workspace | None = None) -> Path:
    """Fine-tune the reference VAE with moment anchoring and Gram alignment."""
    ws = ws or Workspace(cfg)
    ref_path = ws.path("vae_pretrain.ckpt")
    if not ref_path.exists():
        pretrain_vae(ws)
    tensors = load_checkpoint(ref_path)
    vae, disc = build_vae(cfg), build_disc(cfg)
    load_into(vae.params, tensors)
    load_into(disc.params, tensors)
    v = cfg.vae
    w = VaeWeights(v.lambda_m, v.lambda_s, v.lambda_lpips, v.lambda_adv, v.adv_warmup)
    trainer = VaeTrainer(vae, weights=w, head=build_vae_head(cfg), disc=disc,
                         reference=vae.frozen_copy(), lr=v.lr, weight_decay=v.weight_decay)
    return _vae_loop(ws, trainer, v.steps, K_VAE_FT, "vae", "vae.ckpt", ws.prior.state_tensors())


# ---------------------------------------------------------------- stage 2

@dataclass
class LatentBank:
    """Standardized stage-1 latents (encoder means) of every dataset image."""

    z: np.ndarray
    shift: np.ndarray
    scale: np.ndarray

    def to_vae(self, z):
        return z * self.scale + self.shift


def frozen_vae(ws: Workspace) -> tuple[Vae, Path]:
    cfg = ws.cfg
    path = Path(cfg.paths.vae_checkpoint) if cfg.paths.vae_checkpoint else ws.path("vae.ckpt")
    if not path.exists():
        raise ConfigError(f"stage 2 needs a stage-1 VAE checkpoint; {path} does not exist "
                          f"(run train-vae first or set paths.vae_checkpoint)")
    vae = load_vae(cfg, path)
    for p in vae.params.values():
        p.setflags(write=False)
    return vae, path


def latent_bank(ws: Workspace, vae: Vae, stats=None) -> LatentBank:
    ws.data
    mu = np.concatenate([vae.moments(ws.images[i : i + 64]).mu for i in range(0, len(ws.images), 64)])
    if stats is None:
        train = mu[ws.train_idx].reshape(-1, mu.shape[-1]).astype(np.float64)
        shift = train.mean(axis=0).astype(FLOAT32)
        scale = np.maximum(train.std(axis=0), 1e-6).astype(FLOAT32)
    else:
        shift, scale = stats
    return LatentBank(((mu - shift) / scale).astype(FLOAT32), shift, scale)


def build_denoiser(cfg: RunConfig) -> Denoiser:
    d = cfg.diffusion
    return Denoiser(cfg.vae.channels, d.width, d.blocks, d.tap_index, groups=min(8, d.width // 4),
                    rng=RngState(cfg.seed).split(K_DIFF_INIT))


def build_diff_head(cfg: RunConfig, rng: RngState) -> ProjectionHead:
    return ProjectionHead(cfg.diffusion.width, cfg.prior.channels, cfg.diffusion.head_stride,
                          cfg.patch_grid(), rng=rng)


def eval_batches(ws: Workspace, bank: LatentBank, repeats: int):
    """Fixed held-out flow batches: same noise and times for every arm of a configuration."""
    ws.data
    rng = RngState(ws.cfg.seed).split(K_EVAL)
    z1 = bank.z[ws.hold_idx]
    labels = ws.data.labels[ws.hold_idx]
    out = []
    for r in range(repeats):
        rr = rng.split(r)
        t = sample_timestep_logit_normal(rr.split(0), len(z1))
        z0 = rr.split(1).normal(z1.shape, dtype=FLOAT32)
        out.append(FlowBatch(z1, z0, t, labels))
    return out


def evaluate_denoiser(ws: Workspace, model: Denoiser, vae: Vae, bank: LatentBank, repeats: int,
                      denoise_t=0.5) -> dict[str, float]:
    """Held-out flow loss and the fidelity of one-step denoised decodes.

    The denoised latent ``z_t + (1 - t) v`` at ``t = denoise_t`` is decoded
    and compared with the decode of the clean latent.
    """
    fm = [flow_matching_value_and_grad(model, b)[0] for b in eval_batches(ws, bank, repeats)]
    z1 = bank.z[ws.hold_idx]
    z0 = RngState(ws.cfg.seed).split(K_EVAL).split(10_000).normal(z1.shape, dtype=FLOAT32)
    zt = interpolate(z1, z0, denoise_t)
    v = model.velocity(zt, np.full(len(z1), denoise_t), ws.data.labels[ws.hold_idx])
    z_hat = zt + (1.0 - denoise_t) * v
    ref = vae.decode(bank.to_vae(z1))
    out = vae.decode(bank.to_vae(z_hat.astype(FLOAT32)))
    m = image_metrics(ref, out)
    return {"heldout_fm": float(np.mean(fm)), "psnr": m["psnr"], "ssim": m["ssim"]}


def _diffusion_loop(ws: Workspace, trainer: DiffusionTrainer, bank: LatentBank, vae: Vae, steps, rng: RngState,
                    csv_path, eval_path, ckpt_path, extra_tensors, repeats=None):
    cfg = ws.cfg
    d = cfg.diffusion
    repeats = repeats or cfg.conflict.eval_repeats
    log = CsvLog(csv_path, METRICS_HEADER)
    elog = CsvLog(eval_path, EVAL_HEADER)
    use_prior = trainer.alignment_mode != "none"

    def save():
        if ckpt_path is not None:
            save_checkpoint(ckpt_path, {**trainer.state_tensors(), **extra_tensors})

    save()
    result = evaluate_denoiser(ws, trainer.model, vae, bank, repeats)
    elog.write({"step": 0, **result})
    for step in range(1, steps + 1):
        srng = rng.split(step)
        idx = ws.batch_indices(srng.split(0), d.batch_size)
        batch = make_flow_batch(bank.z[idx], ws.data.labels[idx], srng.split(1), d.label_dropout)
        feats = ws.prior_features[idx] if use_prior else None
        losses = trainer.step(batch, feats, step=step - 1)
        if step % cfg.log.every == 0:
            log.write({"step": step, "loss_sga": losses["align"], "loss_fm": losses["fm"],
                       "wall_seconds": ws.wall()})
        if step % cfg.log.eval_every == 0 or step == steps:
            result = evaluate_denoiser(ws, trainer.model, vae, bank, repeats)
            elog.write({"step": step, **result})
        if step % cfg.log.checkpoint_every == 0 or step == steps:
            save()
    return result


def _latent_tensors(bank: LatentBank):
    return {"latent.shift": bank.shift, "latent.scale": bank.scale}


def pretrain_diffusion(ws: Workspace) -> Path:
    """Baseline denoiser trained with flow matching alone."""
    cfg = ws.cfg
    vae, _ = frozen_vae(ws)
    bank = latent_bank(ws, vae)
    model = build_denoiser(cfg)
    trainer = DiffusionTrainer(model, alignment_mode="none", lr=cfg.diffusion.pretrain_lr,
                               weight_decay=cfg.diffusion.weight_decay)
    path = ws.path("diffusion_pretrain.ckpt")
    _diffusion_loop(ws, trainer, bank, vae, cfg.diffusion.pretrain_steps,
                    RngState(cfg.seed).split(K_DIFF_PRE), ws.path("metrics_diffusion_pretrain.csv"),
                    ws.path("eval_diffusion_pretrain.csv"), path, _latent_tensors(bank))
    return path


def _baseline(ws: Workspace):
    cfg = ws.cfg
    path = Path(cfg.paths.baseline_checkpoint) if cfg.paths.baseline_checkpoint else ws.path("diffusion_pretrain.ckpt")
    if not path.exists():
        if cfg.paths.baseline_checkpoint:
            raise ConfigError(f"baseline checkpoint {path} does not exist")
        pretrain_diffusion(ws)
    return load_checkpoint(path)


def _vae_checksum(vae: Vae) -> str:
    return tensors_checksum(vae.params)


def finetune_diffusion(ws: Workspace, baseline: dict, *, alignment_mode, lambda_s, steps, rng: RngState,
                       csv_path, eval_path, ckpt_path=None, lr=None):
    """Fine-tune a copy of the baseline; returns the final held-out evaluation."""
    cfg = ws.cfg
    vae, _ = frozen_vae(ws)
    before = _vae_checksum(vae)
    bank = latent_bank(ws, vae, (baseline["latent.shift"], baseline["latent.scale"]))
    model = build_denoiser(cfg)
    load_into(model.params, baseline, prefix="model.")
    head = build_diff_head(cfg, rng.split(K_HEAD_DIFF)) if alignment_mode != "none" else None
    trainer = DiffusionTrainer(model, head=head, alignment_mode=alignment_mode, lambda_s=lambda_s,
                               lr=cfg.diffusion.lr if lr is None else lr,
                               weight_decay=cfg.diffusion.weight_decay)
    result = _diffusion_loop(ws, trainer, bank, vae, steps, rng.split(K_DIFF_FT), csv_path, eval_path,
                             ckpt_path, _latent_tensors(bank))
    if _vae_checksum(vae) != before:
        raise ContractError("VAE parameters changed during stage 2")
    result["vae_checksum"] = before
    return result


def run_stage2(cfg: RunConfig, ws: Workspace | None = None) -> Path:
    ws = ws or Workspace(cfg)
    frozen_vae(ws)
    baseline = _baseline(ws)
    d = cfg.diffusion
    result = finetune_diffusion(ws, baseline, alignment_mode=d.alignment_mode, lambda_s=d.lambda_s,
                                steps=d.steps, rng=RngState(cfg.seed), csv_path=ws.path("metrics_diffusion.csv"),
                                eval_path=ws.path("eval_diffusion.csv"), ckpt_path=ws.path("diffusion.ckpt"))
    ws.path("vae_checksum.txt").write_text(result["vae_checksum"] + "\n")
    return ws.path("diffusion.ckpt")


# ---------------------------------------------------------------- experiment

ARMS = ("none", "sga", "patchwise")


@dataclass
class ArmResult:
    arm: str
    seed: int
    heldout_fm: float
    psnr: float
    ssim: float


def run_conflict_experiment(cfg: RunConfig, ws: Workspace | None = None) -> dict:
    """Fine-tune every alignment arm from one baseline over several seeds.

    Within a seed all arms see identical batches, noise and head
    initialization; only the alignment objective differs.
    """
    ws = ws or Workspace(cfg)
    frozen_vae(ws)
    baseline = _baseline(ws)
    vae, _ = frozen_vae(ws)
    bank = latent_bank(ws, vae, (baseline["latent.shift"], baseline["latent.scale"]))
    base_model = build_denoiser(cfg)
    load_into(base_model.params, baseline, prefix="model.")
    base = evaluate_denoiser(ws, base_model, vae, bank, cfg.conflict.eval_repeats)
    out_dir = ws.path("conflict")
    out_dir.mkdir(exist_ok=True)
    results = []
    for k in range(cfg.conflict.seeds):
        rng = RngState(cfg.seed).split(K_CONFLICT).split(k)
        for arm in ARMS:
            r = finetune_diffusion(ws, baseline, alignment_mode=arm, lambda_s=cfg.diffusion.lambda_s,
                                   steps=cfg.conflict.steps, rng=rng,
                                   csv_path=out_dir / f"metrics_{arm}_seed{k}.csv",
                                   eval_path=out_dir / f"eval_{arm}_seed{k}.csv")
            results.append(ArmResult(arm, k, r["heldout_fm"], r["psnr"], r["ssim"]))
    report = conflict_report(base, results)
    (out_dir / "report.txt").write_text(report["text"])
    (out_dir / "report.csv").write_text(report["csv"])
    return report


def conflict_report(base: dict, results: list[ArmResult]) -> dict:
    seeds = sorted({r.seed for r in results})
    by = {(r.arm, r.seed): r for r in results}
    means = {a: float(np.mean([by[a, s].heldout_fm for s in seeds])) for a in ARMS}
    order = sorted(ARMS, key=lambda a: means[a])
    margin = 0.02 * base["heldout_fm"]
    wins = sum(by["patchwise", s].heldout_fm - by["sga", s].heldout_fm >= margin for s in seeds)
    sga_ok = sum(by["sga", s].heldout_fm <= 1.01 * by["none", s].heldout_fm for s in seeds)
    lines = [f"baseline heldout_fm {base['heldout_fm']:.6f} psnr {base['psnr']:.3f} ssim {base['ssim']:.4f}",
             "", f"{'arm':<10} {'seed':>4} {'heldout_fm':>12} {'psnr':>8} {'ssim':>8}"]
    csv = ["arm,seed,heldout_fm,psnr,ssim", f"baseline,,{_fmt(base['heldout_fm'])},{_fmt(base['psnr'])},{_fmt(base['ssim'])}"]
    for s in seeds:
        for a in ARMS:
            r = by[a, s]
            lines.append(f"{a:<10} {s:>4} {r.heldout_fm:>12.6f} {r.psnr:>8.3f} {r.ssim:>8.4f}")
            csv.append(f"{a},{s},{_fmt(r.heldout_fm)},{_fmt(r.psnr)},{_fmt(r.ssim)}")
    lines += ["", "mean held-out flow loss: " + ", ".join(f"{a} {means[a]:.6f}" for a in ARMS),
              "ordering (best first): " + " < ".join(order),
              f"seeds with patchwise - sga >= {margin:.6f}: {wins}/{len(seeds)}",
              f"seeds with sga <= 1.01 * none: {sga_ok}/{len(seeds)}"]
    return {"text": "\n".join(lines) + "\n", "csv": "\n".join(csv) + "\n", "baseline": base,
            "results": results, "means": means, "order": order, "patchwise_wins": wins,
            "sga_within_none": sga_ok, "margin": margin}


# ---------------------------------------------------------------- sampling

def load_denoiser(ws: Workspace) -> tuple[Denoiser, dict]:
    path = ws.path("diffusion.ckpt")
    if not path.exists():
        path = ws.path("diffusion_pretrain.ckpt")
    if not path.exists():
        raise ConfigError("no diffusion checkpoint in the run directory; run train-diffusion first")
    tensors = load_checkpoint(path)
    model = build_denoiser(ws.cfg)
    load_into(model.params, tensors, prefix="model.")
    return model, tensors


def sample_images(ws: Workspace, labels=None, steps=None, guidance=None) -> np.ndarray:
    cfg = ws.cfg
    vae, _ = frozen_vae(ws)
    model, tensors = load_denoiser(ws)
    labels = np.arange(10) if labels is None else np.asarray(labels)
    h, w, c = vae.latent_shape((cfg.image_size, cfg.image_size))
    z = euler_sample(model, labels, (h, w, c), steps or cfg.diffusion.sampler_steps,
                     cfg.diffusion.guidance_scale if guidance is None else guidance,
                     RngState(cfg.seed).split(K_SAMPLE))
    z = z.astype(FLOAT32) * tensors["latent.scale"] + tensors["latent.shift"]
    return vae.decode(z)

