"""Run configuration: profiles and the flat ``key = value`` config format.

Keys are dotted ``section.field`` names matching the dataclass fields below,
for example ``model.d_s = 32`` or ``optim.total_steps = 500``. Lines starting
with ``#`` (and trailing ``# ...``) are comments.
"""

from __future__ import annotations

import ast
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    """Unknown key, unparsable value, or inconsistent settings."""


@dataclass
class ModelConfig:
    dim: int = 96
    depth: int = 12
    vit_heads: int = 4
    stages: tuple = ((0, 2), (3, 5), (6, 8), (9, 11))
    patch: int = 14
    pretrain_size: int = 518
    vit_mlp_ratio: float = 4.0
    d_s: int = 32
    spectral_heads: int = 4
    spectral_layers: int = 2
    spectral_mlp_ratio: float = 2.0
    stem_channels: int = 64
    stage_channels: tuple = (128, 256, 256)
    deform_heads: int = 8
    deform_points: int = 4
    final_extractors: int = 3
    gate_bias: float = -2.0
    feedback_bottleneck: float = 0.5
    feedback_ffn_ratio: float = 0.25
    decoder_channels: int = 256
    aux_channels: int = 256
    pool_scales: tuple = (1, 2, 3, 6)
    tile_rows: int = 0


@dataclass
class DataConfig:
    bands: int = 25
    classes: int = 6
    height: int = 64
    width: int = 128
    crop_h: int = 32
    crop_w: int = 64
    train_scenes: int = 48
    val_scenes: int = 8
    noise_std: float = 0.02
    gain_range: float = 0.3
    ablation_band: int = 12
    dark_bands: tuple = (0, 1, 23, 24)


@dataclass
class OptimConfig:
    base_lr: float = 1e-4
    warmup_steps: int = 50
    total_steps: int = 500
    batch_size: int = 2
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    log_every: int = 1


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    seed: int = 0
    out: str = "runs/default"

    def validate(self) -> "RunConfig":
        m, d, o = self.model, self.data, self.optim
        covered = [i for a, b in m.stages for i in range(a, b + 1)]
        if covered != list(range(m.depth)):
            raise ConfigError(f"model.stages {m.stages} must partition range({m.depth}) in order")
        if m.dim % m.vit_heads or m.dim % m.deform_heads:
            raise ConfigError(f"model.dim {m.dim} must be divisible by vit_heads and deform_heads")
        if m.d_s % m.spectral_heads:
            raise ConfigError(f"model.d_s {m.d_s} not divisible by model.spectral_heads {m.spectral_heads}")
        if d.crop_h > d.height or d.crop_w > d.width:
            raise ConfigError("data.crop exceeds data extents")
        if d.classes < 2:
            raise ConfigError("data.classes must be at least 2")
        if not 0 <= d.ablation_band < d.bands or any(not 0 <= b < d.bands for b in d.dark_bands):
            raise ConfigError("band index out of range")
        if not 0 <= o.warmup_steps < o.total_steps:
            raise ConfigError(f"optim.warmup_steps {o.warmup_steps} must be below total_steps {o.total_steps}")
        return self


def desk_profile() -> RunConfig:
    return RunConfig()


def full_profile() -> RunConfig:
    """ViT-B dimensions and real-sensor crops; far beyond a CPU desk run."""
    return RunConfig(
        model=ModelConfig(dim=768, vit_heads=12, spectral_mlp_ratio=4.0, tile_rows=16),
        data=DataConfig(height=1088, width=2048, crop_h=224, crop_w=448),
        optim=OptimConfig(warmup_steps=1500, total_steps=80000),
    )


PROFILES = {"desk": desk_profile, "full": full_profile}


def _coerce(raw: str, current, key: str):
    if isinstance(current, bool):
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(current, (int, float)):
        try:
            return type(current)(float(raw)) if isinstance(current, float) else int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    if isinstance(current, tuple):
        try:
            val = ast.literal_eval(raw)
        except (ValueError, SyntaxError):
            raise ConfigError(f"{key}: expected a tuple literal, got {raw!r}") from None
        if isinstance(val, int):
            val = (val,)
        if not isinstance(val, (list, tuple)):
            raise ConfigError(f"{key}: expected a tuple literal, got {raw!r}")
        return tuple(tuple(v) if isinstance(v, list) else v for v in val)
    return raw


def apply_overrides(cfg: RunConfig, pairs: dict[str, str]) -> RunConfig:
    for key, raw in pairs.items():
        parts = key.split(".")
        target = cfg
        for part in parts[:-1]:
            if not dataclasses.is_dataclass(target) or not hasattr(target, part):
                raise ConfigError(f"unknown config key: {key}")
            target = getattr(target, part)
        leaf = parts[-1]
        if not dataclasses.is_dataclass(target) or leaf not in {f.name for f in dataclasses.fields(target)}:
            raise ConfigError(f"unknown config key: {key}")
        current = getattr(target, leaf)
        if dataclasses.is_dataclass(current):
            raise ConfigError(f"unknown config key: {key}")
        setattr(target, leaf, _coerce(raw, current, key))
    return cfg


def parse_config_text(text: str) -> dict[str, str]:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        pairs[key] = value
    return pairs


def load_config(path: str | Path | None = None, profile: str = "desk") -> RunConfig:
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}")
    cfg = PROFILES[profile]()
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        apply_overrides(cfg, parse_config_text(text))
    return cfg.validate()


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for section in ("model", "data", "optim"):
        for f in dataclasses.fields(getattr(cfg, section)):
            lines.append(f"{section}.{f.name} = {getattr(getattr(cfg, section), f.name)}")
    lines.append(f"seed = {cfg.seed}")
    lines.append(f"out = {cfg.out}")
    return "\n".join(lines) + "\n"
