"""Command-line entry point.

Exit codes: 0 success, 1 a check failed, 2 usage or configuration error,
3 numerical divergence.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from ..errors import ConfigError, ContractError, NumericalError, TrainingDivergence
from ..theory import format_report, report_csv, run_verification
from . import pipeline
from .config import dump_config, load_config
from .viz import emit_pca_visualization, images_to_uint8, tile, write_ppm

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3


def _cmd_verify(ws, args):
    results = run_verification(seed=ws.cfg.seed, scale=args.scale)
    text = format_report(results)
    ws.path("verify_report.txt").write_text(text)
    ws.path("verify_report.csv").write_text(report_csv(results))
    print(text, end="")
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


def _cmd_pretrain_vae(ws, args):
    print(pipeline.pretrain_vae(ws))
    return EXIT_OK


def _cmd_train_vae(ws, args):
    print(pipeline.run_stage1(ws.cfg, ws))
    return EXIT_OK


def _cmd_pretrain_diffusion(ws, args):
    print(pipeline.pretrain_diffusion(ws))
    return EXIT_OK


def _cmd_train_diffusion(ws, args):
    path = pipeline.run_stage2(ws.cfg, ws)
    print(path)
    print("vae checksum unchanged:", ws.path("vae_checksum.txt").read_text().strip())
    return EXIT_OK


def _cmd_sample(ws, args):
    labels = np.arange(10) if args.labels is None else np.array([int(s) for s in args.labels.split(",")])
    images = pipeline.sample_images(ws, labels)
    out = ws.path("samples")
    out.mkdir(exist_ok=True)
    pixels = images_to_uint8(images)
    for i, (lab, img) in enumerate(zip(labels, pixels)):
        write_ppm(out / f"sample_{i:03d}_class{lab}.ppm", img)
    write_ppm(out / "grid.ppm", tile(pixels))
    print(out)
    return EXIT_OK


def _cmd_eval(ws, args):
    lines = []
    vae_ckpt = ws.path("vae.ckpt")
    if vae_ckpt.exists():
        m = pipeline.evaluate_vae(ws, pipeline.load_vae(ws.cfg, vae_ckpt))
        lines.append("vae held-out: " + " ".join(f"{k} {v:.6g}" for k, v in m.items()))
    try:
        model, tensors = pipeline.load_denoiser(ws)
    except ConfigError:
        model = None
    if model is not None:
        vae, _ = pipeline.frozen_vae(ws)
        bank = pipeline.latent_bank(ws, vae, (tensors["latent.shift"], tensors["latent.scale"]))
        r = pipeline.evaluate_denoiser(ws, model, vae, bank, ws.cfg.conflict.eval_repeats)
        lines.append("diffusion held-out: " + " ".join(f"{k} {v:.6g}" for k, v in r.items()))
    if not lines:
        raise ConfigError("nothing to evaluate: no checkpoints in the run directory")
    text = "\n".join(lines) + "\n"
    ws.path("eval_report.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def _cmd_conflict(ws, args):
    report = pipeline.run_conflict_experiment(ws.cfg, ws)
    print(report["text"], end="")
    return EXIT_OK


def _cmd_visualize(ws, args):
    ws.data
    out = ws.path("pca")
    out.mkdir(exist_ok=True)
    grid = ws.cfg.patch_grid()
    upscale = max(1, ws.cfg.image_size // grid[0])
    idx = ws.hold_idx[: args.count]
    for i in idx:
        write_ppm(out / f"image_{i:04d}.ppm", images_to_uint8(ws.images[i]))
        emit_pca_visualization(ws.prior_features[i], grid, out / f"prior_{i:04d}.ppm", upscale)
    vae_ckpt = ws.path("vae.ckpt")
    if vae_ckpt.exists():
        tensors = pipeline.load_checkpoint(vae_ckpt)
        vae = pipeline.build_vae(ws.cfg)
        head = pipeline.build_vae_head(ws.cfg)
        pipeline.load_into(vae.params, tensors)
        pipeline.load_into(head.params, tensors, prefix="head.")
        feats = head.forward(vae.moments(ws.images[idx]).mu)
        for i, f in zip(idx, feats):
            emit_pca_visualization(f, grid, out / f"vae_{i:04d}.ppm", upscale)
    print(out)
    return EXIT_OK


COMMANDS = {
    "verify": (_cmd_verify, "numerically certify the alignment propositions"),
    "pretrain-vae": (_cmd_pretrain_vae, "train the reference VAE without alignment"),
    "train-vae": (_cmd_train_vae, "stage 1: fine-tune the VAE with anchoring and alignment"),
    "pretrain-diffusion": (_cmd_pretrain_diffusion, "train the baseline denoiser without alignment"),
    "train-diffusion": (_cmd_train_diffusion, "stage 2: fine-tune the denoiser with alignment"),
    "sample": (_cmd_sample, "draw class-conditional samples with the Euler sampler"),
    "eval": (_cmd_eval, "held-out metrics of the available checkpoints"),
    "conflict": (_cmd_conflict, "none / sga / patchwise fine-tuning comparison"),
    "visualize": (_cmd_visualize, "PCA renderings of prior and VAE patch features"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value configuration file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one setting (repeatable)")
    common.add_argument("--seed", type=int, help="run seed (overrides file and --set)")
    parser = argparse.ArgumentParser(prog="sgalab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name == "verify":
            p.add_argument("--scale", type=float, default=1.0, help="multiply every trial count")
        if name == "sample":
            p.add_argument("--labels", help="comma-separated class labels (default 0..9)")
        if name == "visualize":
            p.add_argument("--count", type=int, default=4, help="held-out images to render")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        cfg = load_config(args.config, args.set, args.seed)
        print("# resolved configuration")
        print(dump_config(cfg), end="")
        ws = pipeline.Workspace(cfg)
        print(f"# run directory: {ws.dir}")
        with pipeline.run_lock(ws.dir):
            return COMMANDS[args.command][0](ws, args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDivergence, NumericalError) as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ContractError as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
