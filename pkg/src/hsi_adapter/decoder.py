"""UPerNet-style decode head, auxiliary FCN head and the combined loss."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .nn import functional as F
from .nn.layers import Conv2d, ConvBNReLU
from .nn.module import Module
from .tensor import ShapeError, Tensor


class NumericalError(ArithmeticError):
    """A loss or gradient became NaN or infinite."""


class PPM(Module):
    """Pyramid pooling over the coarsest map, fused with the map itself."""

    def __init__(self, cin: int, channels: int, scales=(1, 2, 3, 6)):
        self.scales = tuple(scales)
        self.branches = [ConvBNReLU(cin, channels, 1) for _ in self.scales]
        self.bottleneck = ConvBNReLU(cin + len(self.scales) * channels, channels, 3)

    def forward(self, x: Tensor) -> Tensor:
        size = x.shape[2:]
        outs = [x]
        for s, branch in zip(self.scales, self.branches):
            outs.append(F.resize_bilinear(branch(F.adaptive_avg_pool2d(x, s)), size))
        return self.bottleneck(F.cat_channels(outs))


class UPerHead(Module):
    def __init__(self, cin: int, channels: int, classes: int, scales=(1, 2, 3, 6)):
        self.lateral = [ConvBNReLU(cin, channels, 1) for _ in range(3)]
        self.ppm = PPM(cin, channels, scales)
        self.smooth = [ConvBNReLU(channels, channels, 3) for _ in range(3)]
        self.fuse = ConvBNReLU(4 * channels, channels, 3)
        self.classifier = Conv2d(channels, classes, 1)

    def forward(self, feats, out_hw: tuple[int, int], crop_hw: tuple[int, int] | None = None) -> Tensor:
        """Logits at ``out_hw`` (then cropped to ``crop_hw``) from maps at 1/4..1/32."""
        if len(feats) != 4:
            raise ShapeError(f"decode head takes 4 maps, got {len(feats)}")
        for fine, coarse in zip(feats[:-1], feats[1:]):
            if fine.shape[2] != 2 * coarse.shape[2] or fine.shape[3] != 2 * coarse.shape[3]:
                raise ShapeError(f"maps {fine.shape} and {coarse.shape} are not one octave apart")
        lats = [conv(f) for conv, f in zip(self.lateral, feats[:3])]
        lats.append(self.ppm(feats[3]))
        for i in range(3, 0, -1):
            lats[i - 1] = lats[i - 1] + F.resize_bilinear(lats[i], lats[i - 1].shape[2:])
        outs = [conv(lat) for conv, lat in zip(self.smooth, lats[:3])] + [lats[3]]
        size = outs[0].shape[2:]
        outs = [outs[0]] + [F.resize_bilinear(o, size) for o in outs[1:]]
        logits = self.classifier(self.fuse(F.cat_channels(outs)))
        return _to_output(logits, out_hw, crop_hw)


class FCNHead(Module):
    """Auxiliary head: two 3x3 conv-BN-ReLU layers and a 1x1 classifier."""

    def __init__(self, cin: int, channels: int, classes: int):
        self.convs = [ConvBNReLU(cin, channels, 3), ConvBNReLU(channels, channels, 3)]
        self.classifier = Conv2d(channels, classes, 1)

    def forward(self, x: Tensor, out_hw, crop_hw=None) -> Tensor:
        for conv in self.convs:
            x = conv(x)
        return _to_output(self.classifier(x), out_hw, crop_hw)


def _to_output(logits: Tensor, out_hw, crop_hw) -> Tensor:
    logits = F.resize_bilinear(logits, tuple(out_hw))
    if crop_hw is not None and tuple(crop_hw) != tuple(out_hw):
        logits = logits[:, :, : crop_hw[0], : crop_hw[1]]
    return logits


AUX_WEIGHT = 0.4


@dataclass(frozen=True)
class LossReport:
    l_seg: float
    l_aux: float
    l_total: float


def total_loss(l_seg: Tensor, l_aux: Tensor | None) -> tuple[Tensor, LossReport]:
    """``l_seg + 0.4 * l_aux`` as a differentiable tensor plus its float report."""
    seg = float(l_seg.data)
    aux = 0.0 if l_aux is None else float(l_aux.data)
    if not (math.isfinite(seg) and math.isfinite(aux)):
        raise NumericalError(f"non-finite loss: l_seg={seg}, l_aux={aux}")
    total = l_seg if l_aux is None else l_seg + l_aux * AUX_WEIGHT
    return total, LossReport(seg, aux, float(total.data))
