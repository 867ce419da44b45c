"""Parameter registry, AdamW with decoupled weight decay, cosine warmup schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .nn.module import Module, Parameter
from .tensor import ContractError


@dataclass
class ModelParams:
    """Named parameters with their frozen flags."""

    entries: dict[str, tuple[Parameter, bool]]
    seed: int = 0

    @classmethod
    def from_module(cls, module: Module, seed: int = 0) -> "ModelParams":
        entries = {}
        for name, p in module.named_parameters():
            if name in entries:
                raise ContractError(f"duplicate parameter name {name}")
            entries[name] = (p, not p.requires_grad)
        return cls(entries, seed)

    def trainable(self) -> list[tuple[str, Parameter]]:
        return [(n, p) for n, (p, frozen) in self.entries.items() if not frozen]

    def frozen(self) -> list[tuple[str, Parameter]]:
        return [(n, p) for n, (p, frozen) in self.entries.items() if frozen]

    def snapshot(self, frozen_only: bool = False) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, (p, fr) in self.entries.items() if fr or not frozen_only}


@dataclass
class OptimState:
    base_lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(params: ModelParams, state: OptimState, lr: float) -> None:
    """One AdamW update of every trainable parameter; clears gradients.

    Frozen parameters are skipped entirely and get no moment buffers.
    """
    trainable = params.trainable()
    missing = [n for n, p in trainable if p.grad is None]
    if missing:
        raise ContractError(f"no gradient for trainable parameters: {', '.join(missing[:5])}"
                            + (" ..." if len(missing) > 5 else ""))
    b1, b2 = state.betas
    state.step += 1
    t = state.step
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in trainable:
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if state.weight_decay:
            p.data *= 1.0 - lr * state.weight_decay
        denom = np.sqrt(v / bc2) + state.eps
        p.data -= (lr / bc1) * m / denom
    for _, (p, _) in params.entries.items():
        p.grad = None


def cosine_warmup_lr(step: int, base_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear ramp from 0 over ``warmup_steps``, then cosine decay to 0 at ``total_steps``."""
    if not 0 <= warmup_steps < total_steps:
        raise ValueError(f"warmup_steps {warmup_steps} must lie in [0, {total_steps})")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_grad_norm(params: ModelParams) -> float:
    return math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for _, p in params.trainable()
                         if p.grad is not None))
