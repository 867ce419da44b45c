"""The assembled segmentation network."""

from __future__ import annotations

from dataclasses import dataclass

from .config import ModelConfig
from .decoder import FCNHead, UPerHead
from .interaction import (
    ExtractorFeedback,
    InteractionBlock,
    InteractionContext,
    extractor_reference_points,
    final_extractor_stack,
    injector_reference_points,
)
from .nn.functional import LevelSpec
from .nn.layers import BatchNorm2d, ConvTranspose2d
from .nn.module import Module
from .spatial_prior import PyramidFeatures, SpatialPrior, unflatten_seq
from .spectral import SpectralTransformer
from .tensor import ShapeError, Tensor, as_tensor
from .vit import FROZEN_PREFIX, ViTBackbone, detach_class_token, set_frozen


@dataclass
class ModelOutput:
    logits: Tensor  # [B, C, H, W] at input resolution
    aux_logits: Tensor | None  # training only


def assemble_outputs(f_spm: Tensor, c1: Tensor, spec: LevelSpec, up: ConvTranspose2d) -> list[Tensor]:
    """Unflatten the adapter sequence into 1/8..1/32 maps and build the 1/4 map."""
    f2, f3, f4 = unflatten_seq(f_spm, spec)
    f1 = up(f2)
    if f1.shape != c1.shape:
        raise ShapeError(f"upsampled 1/8 map {f1.shape} does not match c1 {c1.shape}")
    return [f1 + c1, f2, f3, f4]


class HSIAdapter(Module):
    """Spectral transformer + frozen ViT + spatial prior + interaction blocks + UPer decoder.

    Every parameter whose name starts with ``vit.`` is frozen at construction.
    """

    def __init__(self, bands: int, classes: int, cfg: ModelConfig | None = None):
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        self.bands, self.classes = bands, classes
        D = cfg.dim
        self.spectral = SpectralTransformer(bands, cfg.d_s, cfg.spectral_heads, cfg.spectral_layers,
                                            cfg.spectral_mlp_ratio)
        self.vit = ViTBackbone(D, cfg.depth, cfg.vit_heads, cfg.stages, cfg.patch, cfg.pretrain_size,
                               cfg.vit_mlp_ratio)
        self.spm = SpatialPrior(bands, D, cfg.stem_channels, cfg.stage_channels)
        feedback = dict(bottleneck=cfg.feedback_bottleneck, ffn_ratio=cfg.feedback_ffn_ratio)
        self.interactions = [
            InteractionBlock(D, cfg.deform_heads, cfg.deform_points, 3, cfg.gate_bias, **feedback)
            for _ in range(self.vit.num_stages)
        ]
        self.extractors = [
            ExtractorFeedback(D, cfg.deform_heads, cfg.deform_points, **feedback)
            for _ in range(cfg.final_extractors)
        ]
        self.up = ConvTranspose2d(D, D, 2, 2)
        self.out_norms = [BatchNorm2d(D) for _ in range(4)]
        self.decode_head = UPerHead(D, cfg.decoder_channels, classes, cfg.pool_scales)
        self.aux_head = FCNHead(D, cfg.aux_channels, classes)
        set_frozen(self.vit)

    def frozen_names(self) -> list[str]:
        return [n for n, _ in self.named_parameters() if n.startswith(FROZEN_PREFIX)]

    def context(self, vit_grid, vit_padded_hw, pyr: PyramidFeatures) -> InteractionContext:
        return InteractionContext(
            spm_spec=pyr.spec,
            vit_spec=LevelSpec((vit_grid,)),
            injector_ref=injector_reference_points(vit_grid, self.vit.patch, pyr.padded_hw, len(pyr.spec)),
            extractor_ref=extractor_reference_points(pyr.spec, pyr.padded_hw, vit_padded_hw),
        )

    def forward(self, cube, trace: dict | None = None) -> ModelOutput:
        """Segment ``cube [B, N, H, W]``.

        ``trace``, when a dict, collects intermediates: the pseudo-image, the
        pyramid, the per-stage ViT tokens and per-stage gate values.
        """
        cube = as_tensor(cube)
        if cube.ndim != 4 or cube.shape[1] != self.bands:
            raise ShapeError(f"expected [B, {self.bands}, H, W] cube, got {cube.shape}")
        tile = self.cfg.tile_rows or None
        pseudo = self.spectral(cube, tile)
        state = self.vit.patch_embed_forward(pseudo)
        pyr = self.spm(cube)
        ctx = self.context(state.grid, state.padded_hw, pyr)

        tokens, f_spm = state.tokens, pyr.spm_seq
        for stage, block in enumerate(self.interactions):
            tokens, f_spm = block(self.vit, tokens, f_spm, stage, ctx, trace)
        x_final, _ = detach_class_token(tokens)
        f_spm = final_extractor_stack(self.extractors, f_spm, x_final, ctx)

        feats = assemble_outputs(f_spm, pyr.c1, pyr.spec, self.up)
        feats = [norm(f) for norm, f in zip(self.out_norms, feats)]
        logits = self.decode_head(feats, pyr.padded_hw, pyr.input_hw)
        aux = self.aux_head(feats[2], pyr.padded_hw, pyr.input_hw) if self.training else None
        if trace is not None:
            trace.update(pseudo=pseudo, pyramid=pyr, feats=feats, vit_state=state)
        return ModelOutput(logits, aux)

    def plain_vit_tokens(self, cube) -> list[Tensor]:
        """Per-stage ViT tokens with every interaction block bypassed."""
        cube = as_tensor(cube)
        record: list[Tensor] = []
        self.vit(self.spectral(cube, self.cfg.tile_rows or None), record)
        return record


def build_model(bands: int, classes: int, cfg: ModelConfig | None = None, seed: int = 0) -> HSIAdapter:
    model = HSIAdapter(bands, classes, cfg)
    model.initialize(seed)
    return model
