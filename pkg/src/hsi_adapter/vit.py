"""Frozen ViT backbone split into stages for interleaved adapter interaction."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn import functional as F
from .nn.layers import Conv2d, TransformerBlock
from .nn.module import Module, Parameter
from .tensor import ContractError, Tensor, concat, reshape, transpose

FROZEN_PREFIX = "vit."


def _cubic_weights(t: float, a: float = -0.75) -> tuple[float, float, float, float]:
    def near(x):  # |x| <= 1
        return ((a + 2) * x - (a + 3)) * x * x + 1

    def far(x):  # 1 < |x| < 2
        return ((a * x - 5 * a) * x + 8 * a) * x - 4 * a

    return far(t + 1), near(t), near(1 - t), far(2 - t)


def bicubic_matrix(n_in: int, n_out: int, dtype=np.float32) -> np.ndarray:
    """``[n_out, n_in]`` bicubic resampling (a = -0.75, half-pixel centers, edge clamp)."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for o in range(n_out):
        src = (o + 0.5) * scale - 0.5
        i0 = math.floor(src)
        for k, w in zip(range(i0 - 1, i0 + 3), _cubic_weights(src - i0)):
            m[o, min(max(k, 0), n_in - 1)] += w
    return m.astype(dtype)


def resample_pos_embed(grid: Tensor, size: tuple[int, int]) -> Tensor:
    """Bicubically resize a ``[1, G, G, D]`` positional grid to ``size``.

    A no-op when the grid already has the requested size.
    """
    _, gh, gw, D = grid.shape
    if (gh, gw) == tuple(size):
        return grid
    x = transpose(grid, (0, 3, 1, 2))
    mh = bicubic_matrix(gh, size[0], grid.dtype)
    mw = bicubic_matrix(gw, size[1], grid.dtype)
    x = F._separable(x, mh, mw)
    return transpose(x, (0, 2, 3, 1))


@dataclass
class ViTState:
    tokens: Tensor  # [B, 1 + gh*gw, D], class token first
    grid: tuple[int, int]
    padded_hw: tuple[int, int]
    input_hw: tuple[int, int]

    @property
    def num_patches(self) -> int:
        return self.grid[0] * self.grid[1]


def detach_class_token(tokens: Tensor) -> tuple[Tensor, Tensor]:
    return tokens[:, 1:], tokens[:, :1]


def reattach_class_token(patches: Tensor, cls: Tensor) -> Tensor:
    return concat([cls, patches], axis=1)


class ViTBackbone(Module):
    def __init__(
        self,
        dim: int = 96,
        depth: int = 12,
        heads: int = 4,
        stages=((0, 2), (3, 5), (6, 8), (9, 11)),
        patch: int = 14,
        pretrain_size: int = 518,
        mlp_ratio: float = 4.0,
        in_chans: int = 3,
    ):
        stages = tuple((int(a), int(b)) for a, b in stages)
        covered = [i for a, b in stages for i in range(a, b + 1)]
        if covered != list(range(depth)):
            raise ContractError(f"stage boundaries {stages} do not partition {depth} layers in order")
        self.dim, self.patch, self.in_chans = dim, patch, in_chans
        self.stage_bounds = stages
        self.pretrain_grid = pretrain_size // patch
        self.patch_embed = Conv2d(in_chans, dim, patch, stride=patch)
        self.patch_embed.weight.init = ("trunc_normal", 0.02)
        self.cls_token = Parameter((1, 1, dim), ("trunc_normal", 0.02))
        g = self.pretrain_grid
        self.pos_embed = Parameter((1, 1 + g * g, dim), ("trunc_normal", 0.02))
        self.blocks = [TransformerBlock(dim, heads, mlp_ratio) for _ in range(depth)]

    @property
    def num_stages(self) -> int:
        return len(self.stage_bounds)

    def patch_embed_forward(self, img: Tensor) -> ViTState:
        if img.ndim != 4 or img.shape[1] != self.in_chans:
            raise ContractError(f"patch embedding expects [B, {self.in_chans}, H, W], got {img.shape}")
        padded, input_hw = F.pad_to_multiple(img, self.patch)
        x = self.patch_embed(padded)  # [B, D, gh, gw]
        B, D, gh, gw = x.shape
        x = transpose(reshape(x, (B, D, gh * gw)), (0, 2, 1))
        g = self.pretrain_grid
        pos_cls = self.pos_embed[:, :1]
        pos_grid = reshape(self.pos_embed[:, 1:], (1, g, g, D))
        pos_grid = reshape(resample_pos_embed(pos_grid, (gh, gw)), (1, gh * gw, D))
        cls = self.cls_token + pos_cls
        if B > 1:
            cls = concat([cls] * B, axis=0)
        tokens = concat([cls, x + pos_grid], axis=1)
        return ViTState(tokens, (gh, gw), tuple(padded.shape[2:]), input_hw)

    def run_stage(self, tokens: Tensor, stage: int) -> Tensor:
        if not 0 <= stage < self.num_stages:
            raise ContractError(f"stage {stage} outside [0, {self.num_stages})")
        lo, hi = self.stage_bounds[stage]
        for blk in self.blocks[lo : hi + 1]:
            tokens = blk(tokens)
        return tokens

    def forward(self, img: Tensor, record: list | None = None) -> ViTState:
        """Interaction-free forward through every stage.

        When ``record`` is a list, the token tensor after each stage is
        appended to it.
        """
        state = self.patch_embed_forward(img)
        tokens = state.tokens
        for s in range(self.num_stages):
            tokens = self.run_stage(tokens, s)
            if record is not None:
                record.append(tokens)
        state.tokens = tokens
        return state


def set_frozen(module: Module, prefix: str = "") -> None:
    for _, p in module.named_parameters(prefix):
        p.requires_grad = False


__all__ = [
    "FROZEN_PREFIX",
    "ViTBackbone",
    "ViTState",
    "bicubic_matrix",
    "detach_class_token",
    "reattach_class_token",
    "resample_pos_embed",
    "set_frozen",
]
