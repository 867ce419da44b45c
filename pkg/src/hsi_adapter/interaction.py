"""Adapter <-> ViT interaction: injector, modality gate, extractor, feedback.

The injector lets ViT patch tokens sample the multi-scale adapter sequence
with deformable attention; its output projection starts at zero, so the
injected stream initially equals the ViT stream. The gate blends the two
streams per token. After the frozen stage runs, the extractor lets adapter
tokens sample the updated ViT patch grid, and a dense bottleneck
cross-attention plus a small feed-forward refine them further.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import functional as F
from .nn.functional import LevelSpec
from .nn.layers import LayerNorm, Linear, MSDeformAttn, MultiHeadAttention, Mlp
from .nn.module import Module
from .tensor import ShapeError, Tensor, concat
from .vit import ViTBackbone, detach_class_token, reattach_class_token


@dataclass
class InteractionContext:
    """Geometry shared by every block of one forward pass."""

    spm_spec: LevelSpec
    vit_spec: LevelSpec
    injector_ref: np.ndarray  # [T_v, len(spm_spec), 2]
    extractor_ref: np.ndarray  # [spm_spec.total, 1, 2]


def injector_reference_points(grid, patch: int, spm_padded_hw, levels: int) -> np.ndarray:
    """ViT patch centers, in pixels, normalized by the adapter's padded extent."""
    gh, gw = grid
    Hs, Ws = spm_padded_hw
    ys, xs = np.meshgrid((np.arange(gh) + 0.5) * patch / Hs, (np.arange(gw) + 0.5) * patch / Ws, indexing="ij")
    pts = np.clip(np.stack([xs.ravel(), ys.ravel()], axis=-1), 0.0, 1.0)
    return np.repeat(pts[:, None, :], levels, axis=1)


def extractor_reference_points(spm_spec: LevelSpec, spm_padded_hw, vit_padded_hw) -> np.ndarray:
    """Adapter cell centers, in pixels, normalized by the ViT's padded extent."""
    Hs, Ws = spm_padded_hw
    Hv, Wv = vit_padded_hw
    pts = []
    for h, w in spm_spec.levels:
        ys, xs = np.meshgrid((np.arange(h) + 0.5) * (Hs / h) / Hv, (np.arange(w) + 0.5) * (Ws / w) / Wv, indexing="ij")
        pts.append(np.stack([xs.ravel(), ys.ravel()], axis=-1))
    return np.clip(np.concatenate(pts, axis=0), 0.0, 1.0)[:, None, :]


class Injector(Module):
    def __init__(self, dim: int, levels: int = 3, heads: int = 8, points: int = 4):
        self.query_norm = LayerNorm(dim)
        self.feat_norm = LayerNorm(dim)
        self.attn = MSDeformAttn(dim, levels, heads, points, zero_out=True)

    def forward(self, x_vit: Tensor, f_spm: Tensor, spec: LevelSpec, ref_points) -> Tensor:
        return x_vit + self.attn(self.query_norm(x_vit), self.feat_norm(f_spm), spec, ref_points)


class ModalityGate(Module):
    """γ = sigmoid(w·[x_vit ‖ x_injected] + b), one scalar per token."""

    def __init__(self, dim: int, bias_init: float = -2.0):
        self.proj = Linear(2 * dim, 1)
        self.proj.bias.init = ("const", bias_init)

    def gamma(self, x_vit: Tensor, x_injected: Tensor) -> Tensor:
        if x_vit.shape != x_injected.shape:
            raise ShapeError(f"gate inputs differ in shape: {x_vit.shape} vs {x_injected.shape}")
        return F.sigmoid(self.proj(concat([x_vit, x_injected], axis=-1)))

    def forward(self, x_vit: Tensor, x_injected: Tensor, gamma: Tensor | None = None) -> Tensor:
        if gamma is None:
            gamma = self.gamma(x_vit, x_injected)
        return F.gate_blend(x_vit, x_injected, gamma)


class Extractor(Module):
    def __init__(self, dim: int, heads: int = 8, points: int = 4):
        self.query_norm = LayerNorm(dim)
        self.feat_norm = LayerNorm(dim)
        self.attn = MSDeformAttn(dim, 1, heads, points, zero_out=True)

    def forward(self, f_spm: Tensor, x_vit: Tensor, vit_spec: LevelSpec, ref_points) -> Tensor:
        return f_spm + self.attn(self.query_norm(f_spm), self.feat_norm(x_vit), vit_spec, ref_points)


class Feedback(Module):
    """Dense bottleneck cross-attention from adapter tokens to ViT tokens, then FFN."""

    def __init__(self, dim: int, heads: int = 8, bottleneck: float = 0.5, ffn_ratio: float = 0.25):
        inner = int(dim * bottleneck)
        if inner % heads:
            raise ShapeError(f"bottleneck width {inner} not divisible by {heads} heads")
        self.query_norm = LayerNorm(dim)
        self.context_norm = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, inner_dim=inner, zero_out=True)
        self.ffn_norm = LayerNorm(dim)
        self.ffn = Mlp(dim, max(1, int(dim * ffn_ratio)), zero_out=True)

    def forward(self, f_spm: Tensor, x_vit: Tensor, return_weights: bool = False):
        att, weights = self.attn(self.query_norm(f_spm), self.context_norm(x_vit), return_weights=True)
        f_spm = f_spm + att
        f_spm = f_spm + self.ffn(self.ffn_norm(f_spm))
        return (f_spm, weights) if return_weights else f_spm


class ExtractorFeedback(Module):
    def __init__(self, dim: int, heads: int = 8, points: int = 4, bottleneck: float = 0.5, ffn_ratio: float = 0.25):
        self.extractor = Extractor(dim, heads, points)
        self.feedback = Feedback(dim, heads, bottleneck, ffn_ratio)

    def forward(self, f_spm: Tensor, x_vit: Tensor, ctx: InteractionContext) -> Tensor:
        f_spm = self.extractor(f_spm, x_vit, ctx.vit_spec, ctx.extractor_ref)
        return self.feedback(f_spm, x_vit)


class InteractionBlock(Module):
    def __init__(self, dim: int, heads: int = 8, points: int = 4, levels: int = 3, gate_bias: float = -2.0,
                 bottleneck: float = 0.5, ffn_ratio: float = 0.25):
        self.injector = Injector(dim, levels, heads, points)
        self.gate = ModalityGate(dim, gate_bias)
        self.extract = ExtractorFeedback(dim, heads, points, bottleneck, ffn_ratio)

    def forward(self, vit: ViTBackbone, tokens: Tensor, f_spm: Tensor, stage: int, ctx: InteractionContext,
                trace: dict | None = None) -> tuple[Tensor, Tensor]:
        x_vit, cls = detach_class_token(tokens)
        x_injected = self.injector(x_vit, f_spm, ctx.spm_spec, ctx.injector_ref)
        gamma = self.gate.gamma(x_vit, x_injected)
        x_out = self.gate(x_vit, x_injected, gamma)
        tokens = vit.run_stage(reattach_class_token(x_out, cls), stage)
        x_updated, _ = detach_class_token(tokens)
        f_spm = self.extract(f_spm, x_updated, ctx)
        if trace is not None:
            trace.setdefault("gamma", []).append(gamma)
            trace.setdefault("vit_tokens", []).append(tokens)
        return tokens, f_spm


def final_extractor_stack(stack, f_spm: Tensor, x_vit: Tensor, ctx: InteractionContext) -> Tensor:
    for block in stack:
        f_spm = block(f_spm, x_vit, ctx)
    return f_spm
