"""A miniature run of both training stages and the arm comparison.

Run: python3 demos/04_two_stage_toy.py [runs_dir]
Everything is scaled down so it finishes in a couple of minutes; the
numbers are illustrative only.
"""

import sys

from sgalab.harness import pipeline
from sgalab.harness.config import load_config
from sgalab.harness.viz import images_to_uint8, tile, write_ppm

runs = sys.argv[1] if len(sys.argv) > 1 else "demo_runs"
cfg = load_config(overrides=[
    "image_size=32", "data.size=128", "vae.width=16", "vae.disc_width=16",
    "vae.pretrain_steps=150", "vae.pretrain_lr=1e-3", "vae.steps=50", "vae.lr=1e-4", "vae.batch_size=8",
    "diffusion.width=16", "diffusion.blocks=4", "diffusion.batch_size=8",
    "diffusion.pretrain_steps=300", "diffusion.pretrain_lr=1e-3", "diffusion.steps=100", "diffusion.lr=1e-4",
    "diffusion.sampler_steps=20", "diffusion.guidance_scale=3.0", "prior.channels=16",
    "conflict.seeds=1", "conflict.steps=100", "conflict.eval_repeats=2",
    "log.eval_every=50", f"paths.runs={runs}",
])
ws = pipeline.Workspace(cfg)
print("run directory", ws.dir)

# stage 1: reference VAE, then anchored fine-tune with Gram alignment
pipeline.run_stage1(cfg, ws)
vae = pipeline.load_vae(cfg, ws.path("vae.ckpt"))
print("stage 1 held-out:", {k: round(v, 4) for k, v in pipeline.evaluate_vae(ws, vae).items()})

# stage 2: baseline denoiser on frozen latents, then an aligned fine-tune
pipeline.run_stage2(cfg, ws)
print("vae checksum", ws.path("vae_checksum.txt").read_text().strip()[:16], "(unchanged)")

imgs = pipeline.sample_images(ws, labels=list(range(10)))
write_ppm(ws.path("demo_samples.ppm"), tile(images_to_uint8(imgs), columns=5))
print("samples ->", ws.path("demo_samples.ppm"))

# the three fine-tuning arms from one shared baseline
report = pipeline.run_conflict_experiment(cfg, ws)
print(report["text"])
