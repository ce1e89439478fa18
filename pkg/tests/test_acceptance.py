"""Exit criteria A1-A8.

Each test prints one ``A<n> PASS|FAIL`` line with the measured numbers.
A5-A7 train real (small) models and take several minutes each.
"""

import shutil
import time
from pathlib import Path

import numpy as np
import pytest

from sgalab.alignment import repa_loss, repa_loss_grad, sga_loss, sga_loss_grad
from sgalab.flow import Denoiser, FlowBatch, flow_matching_loss, flow_matching_value_and_grad
from sgalab.harness import pipeline
from sgalab.harness.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, tensors_checksum
from sgalab.harness.config import load_config
from sgalab.numerics import RngState
from sgalab.theory import certify_containment, certify_gauge, certify_spectral
from sgalab.vae import (
    Discriminator, LatentMoments, PerceptualProxy, VaeTrainer, generator_adv_value_and_grad, moment_loss,
    moment_value_and_grad, reconstruction_loss, reconstruction_value_and_grad,
)

pytestmark = pytest.mark.acceptance

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture
def verdict(capsys):
    def emit(name, passed, detail):
        with capsys.disabled():
            print(f"\n{name} {'PASS' if passed else 'FAIL'}: {detail}")
    return emit


def _summary(results):
    return "; ".join(f"{r.name} worst {r.worst:.2e} (tol {r.tolerance:.0e})" for r in results)


# ------------------------------------------------------------------ A1-A3

def test_a1_gauge_invariance(verdict):
    t0 = time.perf_counter()
    results = certify_gauge(instances=1000, transforms=100, seed=0)
    secs = time.perf_counter() - t0
    ok = all(r.passed for r in results) and secs <= 60
    verdict("A1", ok, f"{_summary(results)}; {secs:.1f}s")
    assert ok


def test_a2_spectral_and_subspace_bounds(verdict):
    t0 = time.perf_counter()
    results = certify_spectral(pairs=1000, ks=(1, 2, 3), gap_min=0.05, seed=1)
    secs = time.perf_counter() - t0
    ok = all(r.passed for r in results) and secs <= 120
    verdict("A2", ok, f"{_summary(results)}; {secs:.1f}s")
    assert ok


def test_a3_containment(verdict):
    t0 = time.perf_counter()
    results = certify_containment(pairs=1000, orbits=200, displacements=500, seed=2)
    secs = time.perf_counter() - t0
    ok = all(r.passed for r in results) and secs <= 120
    verdict("A3", ok, f"{_summary(results)}; {secs:.1f}s")
    assert ok


# ------------------------------------------------------------------ A4

def _fd_entries(f, x, idx, h=1e-6):
    flat = x.reshape(-1)
    out = []
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        out.append((up - down) / (2 * h))
    return np.array(out)


def _rel(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300))


def _instance_sga(r):
    n, c = 2 + int(r.integers(10)), 2 + int(r.integers(6))
    g, f = r.normal((n, c)), r.normal((n, 1 + int(r.integers(6))))
    return _rel(sga_loss_grad(g, f), _fd_entries(lambda: sga_loss(g, f), g, range(g.size)).reshape(g.shape))


def _instance_repa(r):
    n, c = 2 + int(r.integers(10)), 2 + int(r.integers(6))
    g, f = r.normal((n, c)), r.normal((n, c))
    return _rel(repa_loss_grad(g, f), _fd_entries(lambda: repa_loss(g, f), g, range(g.size)).reshape(g.shape))


def _instance_rec(r):
    x, y = r.normal((1, 4, 4, 3)), r.normal((1, 4, 4, 3))
    _, d = reconstruction_value_and_grad(x, y)
    return _rel(d, _fd_entries(lambda: reconstruction_loss(x, y), y, range(y.size)).reshape(y.shape))


def _instance_perc(r, proxy):
    x = r.uniform((1, 8, 8, 3)) * 2 - 1
    y = x + 0.3 * r.normal(x.shape)
    _, d = proxy.value_and_grad(x, y)
    return _rel(d, _fd_entries(lambda: proxy.loss(x, y), y, range(y.size)).reshape(y.shape))


def _instance_adv(r):
    disc = Discriminator(8, rng=r.split(0), dtype=np.float64)
    y = r.uniform((1, 8, 8, 3)) * 2 - 1
    _, d = generator_adv_value_and_grad(disc, y)
    return _rel(d, _fd_entries(lambda: -float(np.mean(disc.forward(y))), y, range(y.size)).reshape(y.shape))


def _instance_moment(r):
    shape = (2, 2, 2, 2)
    mu, lv = r.normal(shape), r.normal(shape)
    ref = LatentMoments(r.normal(shape), r.normal(shape))
    _, d_mu, d_lv = moment_value_and_grad(LatentMoments(mu, lv), ref)
    f = lambda: moment_loss(LatentMoments(mu, lv), ref)  # noqa: E731
    fd_mu = _fd_entries(f, mu, range(mu.size)).reshape(shape)
    fd_lv = _fd_entries(f, lv, range(lv.size)).reshape(shape)
    return max(_rel(d_mu, fd_mu), _rel(d_lv, fd_lv))


def _instance_fm(r):
    model = Denoiser(2, width=8, blocks=2, tap_index=1, groups=4, rng=r.split(0), dtype=np.float64)
    z1 = r.normal((2, 4, 4, 2))
    batch = FlowBatch(z1, r.normal(z1.shape), r.uniform((2,)), np.array([1, 10]))
    _, dv, _, cache = flow_matching_value_and_grad(model, batch)
    grads = model.backward(cache, dv)
    worst = 0.0
    for name, p in model.params.items():
        idx = r.split(len(name)).permutation(p.size)[:4]
        num = _fd_entries(lambda: flow_matching_loss(model, batch)[0], p, idx)
        worst = max(worst, _rel(grads[name].reshape(-1)[idx], num))
    return worst


def test_a4_gradient_certification(verdict):
    t0 = time.perf_counter()
    proxy = PerceptualProxy(dtype=np.float64)
    cases = {"sga": _instance_sga, "repa": _instance_repa, "rec": _instance_rec,
             "perceptual": lambda r: _instance_perc(r, proxy), "adversarial": _instance_adv,
             "moment": _instance_moment, "flow": _instance_fm}
    worst = {name: max(fn(RngState(400 + k).split(i)) for i in range(20)) for k, (name, fn) in enumerate(cases.items())}
    secs = time.perf_counter() - t0
    ok = all(v <= 1e-4 for v in worst.values()) and secs <= 600
    verdict("A4", ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f" (20 instances each); {secs:.1f}s")
    assert ok


# ------------------------------------------------------------------ A5

def test_a5_conflict_direction(tmp_path, verdict):
    t0 = time.perf_counter()
    cfg = load_config(CONFIGS / "conflict.cfg", [f"paths.runs={tmp_path}"])
    assert cfg.image_size == 32 and cfg.diffusion.width == 32 and cfg.diffusion.lambda_s == 1.0
    assert cfg.conflict.seeds == 5 and cfg.conflict.steps == 2000
    ws = pipeline.Workspace(cfg)
    pipeline.run_stage1(cfg, ws)
    report = pipeline.run_conflict_experiment(cfg, ws)
    secs = time.perf_counter() - t0
    by = {(r.arm, r.seed): r.heldout_fm for r in report["results"]}
    gaps = [by["patchwise", s] - by["sga", s] for s in range(5)]
    excess = [by["sga", s] / by["none", s] - 1 for s in range(5)]
    wins = sum(g >= report["margin"] for g in gaps)
    sga_ok = all(e <= 0.01 for e in excess)
    ok = wins >= 4 and sga_ok and secs <= 1800
    verdict("A5", ok, f"patchwise - sga per seed {[round(g, 4) for g in gaps]} vs margin {report['margin']:.4f} "
                      f"({wins}/5); sga vs none excess {[f'{e:+.2%}' for e in excess]}; {secs / 60:.1f} min")
    assert ok


# ------------------------------------------------------------------ A6, A7

def _stage1_pair(tmp_path, key):
    """Stage 1 twice from one shared reference VAE, differing only in ``key = 0``."""
    cfg_on = load_config(CONFIGS / "stage1.cfg", [f"paths.runs={tmp_path}"])
    cfg_off = load_config(CONFIGS / "stage1.cfg", [f"paths.runs={tmp_path}", f"{key}=0"])
    ws_on, ws_off = pipeline.Workspace(cfg_on), pipeline.Workspace(cfg_off)
    t0 = time.perf_counter()
    pipeline.pretrain_vae(ws_on)
    shutil.copy(ws_on.path("vae_pretrain.ckpt"), ws_off.path("vae_pretrain.ckpt"))
    pipeline.run_stage1(cfg_on, ws_on)
    pipeline.run_stage1(cfg_off, ws_off)
    return ws_on, ws_off, time.perf_counter() - t0


def _column(path, name):
    lines = path.read_text().splitlines()
    col = lines[0].split(",").index(name)
    return [(int(row.split(",")[0]), row.split(",")[col]) for row in lines[1:]]


def test_a6_moment_anchoring(tmp_path, verdict):
    ws_on, ws_off, secs = _stage1_pair(tmp_path, "vae.lambda_m")
    on = [float(v) for _, v in _column(ws_on.path("metrics_vae.csv"), "loss_moment")]
    off = [float(v) for _, v in _column(ws_off.path("metrics_vae.csv"), "loss_moment")]
    assert len(on) == len(off)
    tail_on, tail_off = float(np.mean(on[-50:])), float(np.mean(off[-50:]))
    ratio = tail_on / tail_off
    ok = ratio < 0.25 and secs <= 1200
    verdict("A6", ok, f"moment loss, last 50 steps: anchored {tail_on:.4g} vs free {tail_off:.4g} "
                      f"(ratio {ratio:.2e}, need < 0.25); {secs / 60:.1f} min")
    assert ok


def test_a7_alignment_keeps_fidelity(tmp_path, verdict):
    ws_on, ws_off, secs = _stage1_pair(tmp_path, "vae.lambda_s")
    psnr_on = float(_column(ws_on.path("metrics_vae.csv"), "psnr")[-1][1])
    psnr_off = float(_column(ws_off.path("metrics_vae.csv"), "psnr")[-1][1])
    ok = psnr_on >= psnr_off - 0.5 and secs <= 1200
    verdict("A7", ok, f"held-out PSNR with alignment {psnr_on:.3f} dB vs without {psnr_off:.3f} dB "
                      f"(delta {psnr_on - psnr_off:+.3f}, need >= -0.5); {secs / 60:.1f} min")
    assert ok


# ------------------------------------------------------------------ A8

TINY = ["image_size=16", "data.size=48", "vae.channels=2", "vae.width=8", "vae.disc_width=8", "vae.steps=4",
        "vae.pretrain_steps=4", "vae.batch_size=4", "diffusion.width=8", "diffusion.blocks=2",
        "diffusion.tap_index=1", "diffusion.batch_size=4", "diffusion.pretrain_steps=4", "diffusion.steps=4",
        "prior.channels=8", "conflict.seeds=1", "conflict.steps=3", "conflict.eval_repeats=1",
        "log.eval_every=2", "log.checkpoint_every=2"]


def test_a8_determinism_and_persistence(tmp_path, verdict):
    t0 = time.perf_counter()
    files = ["metrics_vae_pretrain.csv", "vae_pretrain.ckpt", "metrics_vae.csv", "vae.ckpt",
             "metrics_diffusion_pretrain.csv", "diffusion_pretrain.ckpt", "metrics_diffusion.csv",
             "eval_diffusion.csv", "diffusion.ckpt", "conflict/report.txt", "conflict/metrics_sga_seed0.csv"]
    snapshots = []
    for sub in ("first", "second"):
        cfg = load_config(overrides=[*TINY, f"paths.runs={tmp_path / sub}"])
        ws = pipeline.Workspace(cfg)
        pipeline.run_stage1(cfg, ws)
        pipeline.run_stage2(cfg, ws)
        pipeline.run_conflict_experiment(cfg, ws)
        snapshots.append({f: ws.path(f).read_bytes() for f in files})
    identical = snapshots[0] == snapshots[1]

    # round trip of a full trainer state, optimizer moments included
    trainer = VaeTrainer(pipeline.build_vae(cfg), disc=pipeline.build_disc(cfg), head=pipeline.build_vae_head(cfg))
    state = trainer.state_tensors()
    back = decode_checkpoint(encode_checkpoint(state))
    bitwise = set(back) == set(state) and all(
        back[k].tobytes() == np.asarray(v, dtype=np.float32).tobytes() for k, v in state.items())
    for name in ("vae.ckpt", "diffusion.ckpt"):
        bitwise = bitwise and encode_checkpoint(load_checkpoint(ws.path(name))) == snapshots[1][name]

    vae = pipeline.load_vae(cfg, ws.path("vae.ckpt"))
    frozen = ws.path("vae_checksum.txt").read_text().strip() == tensors_checksum(vae.params)
    secs = time.perf_counter() - t0
    ok = identical and bitwise and frozen and secs <= 300
    verdict("A8", ok, f"reruns byte-identical over {len(files)} artifacts: {identical}; "
                      f"checkpoint round-trip bitwise: {bitwise}; VAE checksum unchanged: {frozen}; {secs:.1f}s")
    assert ok
