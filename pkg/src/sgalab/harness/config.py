"""Run configuration: nested dataclasses addressed by dotted keys.

Files are flat ``key = value`` text with ``#`` comments.  Precedence is
defaults, then file, then ``--set`` overrides.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import ConfigError


@dataclass
class DataConfig:
    size: int = 512
    holdout: float = 0.1


@dataclass
class VaeConfig:
    compression: int = 4
    channels: int = 4
    width: int = 32
    disc_width: int = 32
    lambda_m: float = 1.0
    lambda_s: float = 1.0
    lambda_lpips: float = 0.1
    lambda_adv: float = 0.05
    adv_warmup: float = 0.2
    lr: float = 1e-5
    weight_decay: float = 1e-4
    steps: int = 5000
    batch_size: int = 16
    pretrain_steps: int = 2000
    pretrain_lr: float = 5e-4


@dataclass
class DiffusionConfig:
    lambda_s: float = 1.0
    alignment_mode: str = "sga"
    tap_index: int = 3
    width: int = 64
    blocks: int = 6
    head_stride: int = 1
    lr: float = 1e-6
    weight_decay: float = 1e-4
    steps: int = 5000
    batch_size: int = 16
    pretrain_steps: int = 5000
    pretrain_lr: float = 1e-4
    label_dropout: float = 0.1
    sampler_steps: int = 50
    guidance_scale: float = 7.0


@dataclass
class PriorConfig:
    seed: int = 0
    channels: int = 32
    patch_budget: int = 0  # 0: one patch per 16 pixels


@dataclass
class ConflictConfig:
    seeds: int = 5
    steps: int = 2000
    eval_repeats: int = 4


@dataclass
class LogConfig:
    every: int = 1
    eval_every: int = 500
    checkpoint_every: int = 1000
    wall_clock: bool = False


@dataclass
class PathConfig:
    runs: str = "runs"
    vae_checkpoint: str = ""
    baseline_checkpoint: str = ""


@dataclass
class RunConfig:
    seed: int = 0
    image_size: int = 64
    data: DataConfig = field(default_factory=DataConfig)
    vae: VaeConfig = field(default_factory=VaeConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    conflict: ConflictConfig = field(default_factory=ConflictConfig)
    log: LogConfig = field(default_factory=LogConfig)
    paths: PathConfig = field(default_factory=PathConfig)

    def validate(self):
        if self.image_size % 16:
            raise ConfigError(f"image_size must be divisible by 16, got {self.image_size}")
        if self.diffusion.alignment_mode not in ("none", "sga", "patchwise"):
            raise ConfigError(f"diffusion.alignment_mode must be none, sga or patchwise")
        if not 0 <= self.diffusion.tap_index < self.diffusion.blocks:
            raise ConfigError("diffusion.tap_index must be below diffusion.blocks")
        if self.vae.compression not in (4, 8):
            raise ConfigError("vae.compression must be 4 or 8")
        if not 0 < self.data.holdout < 1:
            raise ConfigError("data.holdout must lie in (0, 1)")
        return self

    def patch_grid(self):
        budget = self.prior.patch_budget or self.image_size // 16
        return budget, budget


def _leaves(obj, prefix=""):
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(v):
            yield from _leaves(v, key + ".")
        else:
            yield key, f, obj


def valid_keys(cfg: RunConfig | None = None) -> list[str]:
    return [k for k, _, _ in _leaves(cfg or RunConfig())]


def _parse_value(raw: str, current, key):
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(current).__name__}") from None
    return raw


def set_value(cfg: RunConfig, key: str, raw: str) -> None:
    for k, f, owner in _leaves(cfg):
        if k == key:
            setattr(owner, f.name, _parse_value(raw, getattr(owner, f.name), key))
            return
    raise ConfigError(f"unknown config key {key!r}; valid keys: {', '.join(valid_keys(cfg))}")


def parse_assignment(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise ConfigError(f"expected key=value, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def load_config(path=None, overrides=(), seed=None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                key, value = parse_assignment(line)
            except ConfigError as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from None
            set_value(cfg, key, value)
    for item in overrides:
        set_value(cfg, *parse_assignment(item))
    if seed is not None:
        cfg.seed = int(seed)
    return cfg.validate()


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for key, _, owner in _leaves(cfg):
        v = getattr(owner, key.rsplit(".", 1)[-1])
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{key} = {v!r}" if isinstance(v, float) else f"{key} = {v}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> str:
    """Digest of every setting except output locations."""
    body = "".join(line + "\n" for line in dump_config(cfg).splitlines() if not line.startswith("paths."))
    return hashlib.sha256(body.encode()).hexdigest()[:12]


def run_dir(cfg: RunConfig) -> Path:
    return Path(cfg.paths.runs) / config_hash(cfg)
