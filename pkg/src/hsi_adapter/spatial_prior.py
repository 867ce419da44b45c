"""Spectral-enhanced spatial prior: a small CNN pyramid over the raw cube."""

from __future__ import annotations

from dataclasses import dataclass

from .nn import functional as F
from .nn.functional import LevelSpec
from .nn.layers import BatchNorm2d, Conv2d, ConvBNReLU
from .nn.module import Module
from .tensor import ShapeError, Tensor, concat, reshape, transpose


@dataclass
class PyramidFeatures:
    c1: Tensor  # [B, D, H/4, W/4]
    c2: Tensor
    c3: Tensor
    c4: Tensor
    spm_seq: Tensor  # [B, sum(h*w), D], levels 1/8, 1/16, 1/32
    spec: LevelSpec
    input_hw: tuple[int, int]
    padded_hw: tuple[int, int]


def flatten_map(x: Tensor) -> Tensor:
    """``[B, D, h, w]`` -> ``[B, h*w, D]`` in row-major pixel order."""
    B, D, h, w = x.shape
    return transpose(reshape(x, (B, D, h * w)), (0, 2, 1))


def unflatten_seq(seq: Tensor, spec: LevelSpec) -> list[Tensor]:
    """Inverse of flattening every level and concatenating."""
    if seq.shape[1] != spec.total:
        raise ShapeError(f"sequence length {seq.shape[1]} != level total {spec.total}")
    B, _, D = seq.shape
    maps = []
    for (h, w), start in zip(spec.levels, spec.offsets):
        part = seq[:, start : start + h * w]
        maps.append(reshape(transpose(part, (0, 2, 1)), (B, D, h, w)))
    return maps


class SpatialPrior(Module):
    """Depthwise-separable spectral filter, conv stem, three stride-2 stages.

    ``c1`` is projected to ``dim`` as well as ``c2..c4`` so it can be added to
    the upsampled 1/8 map when the decoder inputs are assembled.
    """

    def __init__(self, bands: int, dim: int, stem: int = 64, widths=(128, 256, 256)):
        self.bands, self.dim = bands, dim
        self.depthwise = Conv2d(bands, bands, 3, 1, 1, groups=bands, bias=False)
        self.pointwise = Conv2d(bands, stem, 1, bias=False)
        self.filter_bn = BatchNorm2d(stem)
        self.stem = [ConvBNReLU(stem, stem, 3, 2), ConvBNReLU(stem, stem, 3, 1), ConvBNReLU(stem, stem, 3, 1)]
        chans = (stem, *widths)
        self.stages = [ConvBNReLU(chans[i], chans[i + 1], 3, 2) for i in range(3)]
        self.proj = [Conv2d(c, dim, 1) for c in chans]

    def spectral_filter(self, x: Tensor) -> Tensor:
        return F.relu(self.filter_bn(self.pointwise(self.depthwise(x))))

    def stem_forward(self, f: Tensor) -> Tensor:
        for layer in self.stem:
            f = layer(f)
        return F.max_pool2d(f, 3, 2, 1)

    def pyramid_stages(self, c1: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        outs, x = [], c1
        for stage in self.stages:
            x = stage(x)
            outs.append(x)
        return tuple(outs)

    def project_and_flatten(self, c1, c2, c3, c4, input_hw, padded_hw) -> PyramidFeatures:
        p1, p2, p3, p4 = (proj(c) for proj, c in zip(self.proj, (c1, c2, c3, c4)))
        spec = LevelSpec(tuple(tuple(p.shape[2:]) for p in (p2, p3, p4)))
        seq = concat([flatten_map(p) for p in (p2, p3, p4)], axis=1)
        return PyramidFeatures(p1, p2, p3, p4, seq, spec, input_hw, padded_hw)

    def forward(self, x: Tensor) -> PyramidFeatures:
        if x.shape[1] != self.bands:
            raise ShapeError(f"cube has {x.shape[1]} bands, prior built for {self.bands}")
        x, input_hw = F.pad_to_multiple(x, 32)
        c1 = self.stem_forward(self.spectral_filter(x))
        c2, c3, c4 = self.pyramid_stages(c1)
        return self.project_and_flatten(c1, c2, c3, c4, input_hw, tuple(x.shape[2:]))
