"""Training and evaluation loops over the synthetic scenes."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .config import RunConfig
from .data import SynthConfig, random_crop, synth_dataset
from .decoder import LossReport, NumericalError, total_loss
from .model import HSIAdapter, build_model
from .nn import functional as F
from .optim import ModelParams, OptimState, cosine_warmup_lr, optimizer_step
from .tensor import Tensor, no_grad

VAL_OFFSET = 1_000_000
LOSS_FIELDS = ("step", "lr", "l_seg", "l_aux", "l_total")


def synth_config(cfg: RunConfig) -> SynthConfig:
    d = cfg.data
    return SynthConfig(
        bands=d.bands, classes=d.classes, height=d.height, width=d.width, noise_std=d.noise_std,
        gain_range=d.gain_range, ablation_band=d.ablation_band, dark_bands=tuple(d.dark_bands), seed=cfg.seed,
    )


def train_split(cfg: RunConfig):
    return synth_dataset(synth_config(cfg), range(cfg.data.train_scenes))


def val_split(cfg: RunConfig):
    return synth_dataset(synth_config(cfg), range(VAL_OFFSET, VAL_OFFSET + cfg.data.val_scenes))


class BatchSampler:
    """Deterministic stream of random crops drawn from a list of scenes."""

    def __init__(self, scenes, crop_hw, batch_size: int, seed: int, align: int = 4):
        self.scenes, self.crop_hw, self.batch_size, self.align = scenes, crop_hw, batch_size, align
        self.rng = np.random.default_rng([seed, 0xBA7C])

    def next(self) -> tuple[np.ndarray, np.ndarray]:
        cubes, labels = [], []
        for _ in range(self.batch_size):
            cube, lab = self.scenes[int(self.rng.integers(len(self.scenes)))]
            c, l = random_crop(cube.data, lab, self.crop_hw, self.rng, self.align)
            cubes.append(c)
            labels.append(l)
        return np.stack(cubes).astype(np.float32), np.stack(labels)


@dataclass
class TrainResult:
    model: HSIAdapter
    params: ModelParams
    log: list[dict] = field(default_factory=list)
    initial_frozen: dict[str, np.ndarray] = field(default_factory=dict)


def train_step(model: HSIAdapter, params: ModelParams, state: OptimState, cube: np.ndarray,
               labels: np.ndarray, lr: float) -> LossReport:
    out = model(Tensor(cube))
    l_seg = F.cross_entropy(out.logits, labels)
    l_aux = F.cross_entropy(out.aux_logits, labels)
    loss, report = total_loss(l_seg, l_aux)
    loss.backward()
    for name, p in params.trainable():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericalError(f"non-finite gradient in {name}")
    optimizer_step(params, state, lr)
    return report


def train(cfg: RunConfig, scenes=None, steps: int | None = None,
          on_step: Callable[[dict], None] | None = None) -> TrainResult:
    """Train from scratch with ``cfg``; ``steps`` truncates the schedule."""
    d, o = cfg.data, cfg.optim
    model = build_model(d.bands, d.classes, cfg.model, cfg.seed)
    model.train()
    params = ModelParams.from_module(model, cfg.seed)
    result = TrainResult(model, params, initial_frozen=params.snapshot(frozen_only=True))
    state = OptimState(o.base_lr, (o.beta1, o.beta2), o.weight_decay, o.eps)
    sampler = BatchSampler(scenes if scenes is not None else train_split(cfg), (d.crop_h, d.crop_w),
                           o.batch_size, cfg.seed)
    last = o.total_steps if steps is None else min(steps, o.total_steps)
    for step in range(1, last + 1):
        lr = cosine_warmup_lr(step, o.base_lr, o.warmup_steps, o.total_steps)
        cube, labels = sampler.next()
        rep = train_step(model, params, state, cube, labels, lr)
        row = {"step": step, "lr": lr, "l_seg": rep.l_seg, "l_aux": rep.l_aux, "l_total": rep.l_total}
        result.log.append(row)
        if on_step is not None:
            on_step(row)
    return result


def write_loss_csv(path: str | Path, log: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_FIELDS)
        for row in log:
            w.writerow([row["step"]] + [repr(float(row[k])) for k in LOSS_FIELDS[1:]])


def read_loss_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in r.items()} for r in csv.DictReader(fh)]


def predictor(model: HSIAdapter) -> Callable[[np.ndarray], np.ndarray]:
    """``cube [N, H, W] -> labels [H, W]`` in eval mode, without gradients."""

    def predict(cube: np.ndarray) -> np.ndarray:
        model.eval()
        with no_grad():
            out = model(Tensor(np.asarray(cube, np.float32)[None]))
        logits = out.logits.data[0]
        if not np.all(np.isfinite(logits)):
            raise NumericalError("non-finite logits")
        return logits.argmax(axis=0).astype(np.uint8)

    return predict


def loss_law_holds(row: dict) -> bool:
    """``l_total`` equals ``l_seg + 0.4 * l_aux`` up to one float32 rounding unit."""
    expect = np.float32(row["l_seg"]) + np.float32(row["l_aux"]) * np.float32(0.4)
    return abs(float(row["l_total"]) - float(expect)) <= float(np.spacing(np.float32(abs(expect))))


__all__ = [
    "BatchSampler", "TrainResult", "loss_law_holds", "predictor", "read_loss_csv", "synth_config",
    "train", "train_split", "train_step", "val_split", "write_loss_csv",
]
