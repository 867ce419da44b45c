"""Layer modules wrapping the functional primitives."""

from __future__ import annotations

import numpy as np

from ..tensor import Tensor
from . import functional as F
from .functional import LevelSpec
from .module import Module, Parameter


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, bias: bool = True, init=("trunc_normal", 0.02), zero: bool = False):
        self.weight = Parameter((out_dim, in_dim), ("zeros",) if zero else init)
        self.bias = Parameter((out_dim,), ("zeros",)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        self.weight = Parameter((dim,), ("ones",))
        self.bias = Parameter((dim,), ("zeros",))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.weight, self.bias, self.eps)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.weight = Parameter((channels,), ("ones",))
        self.bias = Parameter((channels,), ("zeros",))
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(
            x, self.weight, self.bias, self.running_mean, self.running_var,
            self.training, self.momentum, self.eps,
        )


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, stride: int = 1, padding: int = 0,
                 groups: int = 1, bias: bool = True):
        fan_in = (cin // groups) * kernel * kernel
        self.weight = Parameter((cout, cin // groups, kernel, kernel), ("kaiming", fan_in))
        self.bias = Parameter((cout,), ("zeros",)) if bias else None
        self.stride, self.padding, self.groups = stride, padding, groups

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class ConvTranspose2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int = 2, stride: int = 2, padding: int = 0):
        self.weight = Parameter((cin, cout, kernel, kernel), ("kaiming", cin))
        self.bias = Parameter((cout,), ("zeros",))
        self.stride, self.padding = stride, padding

    def forward(self, x: Tensor) -> Tensor:
        return F.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvBNReLU(Module):
    """Convolution (no bias) followed by batch normalization and ReLU."""

    def __init__(self, cin: int, cout: int, kernel: int = 3, stride: int = 1, padding: int | None = None):
        self.conv = Conv2d(cin, cout, kernel, stride, kernel // 2 if padding is None else padding, bias=False)
        self.bn = BatchNorm2d(cout)

    def forward(self, x: Tensor) -> Tensor:
        return F.relu(self.bn(self.conv(x)))


class MultiHeadAttention(Module):
    """Scaled dot-product attention with separate q/k/v/out projections.

    ``inner_dim`` below ``dim`` gives a bottleneck; ``zero_out`` zero-initializes
    the output projection.
    """

    def __init__(self, dim: int, heads: int, inner_dim: int | None = None, zero_out: bool = False):
        inner = inner_dim or dim
        self.heads = heads
        self.q = Linear(dim, inner)
        self.k = Linear(dim, inner)
        self.v = Linear(dim, inner)
        self.out = Linear(inner, dim, zero=zero_out)

    def forward(self, q_in: Tensor, kv_in: Tensor | None = None, return_weights: bool = False):
        kv_in = q_in if kv_in is None else kv_in
        out, weights = F.scaled_dot_attention(self.q(q_in), self.k(kv_in), self.v(kv_in), self.heads)
        out = self.out(out)
        return (out, weights) if return_weights else out


class Mlp(Module):
    def __init__(self, dim: int, hidden: int, zero_out: bool = False):
        self.fc1 = Linear(dim, hidden)
        self.fc2 = Linear(hidden, dim, zero=zero_out)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class TransformerBlock(Module):
    """Pre-norm encoder block: x + attn(norm(x)), then x + mlp(norm(x))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class MSDeformAttn(Module):
    """Multi-scale deformable attention with learnable projections.

    Sampling offsets start at zero and attention logits start uniform. The
    output projection is zero-initialized when ``zero_out`` is set.
    """

    def __init__(self, dim: int, levels: int, heads: int = 8, points: int = 4, zero_out: bool = True):
        self.heads, self.levels, self.points = heads, levels, points
        self.value = Linear(dim, dim)
        self.offsets = Linear(dim, heads * levels * points * 2, zero=True)
        self.weights = Linear(dim, heads * levels * points, zero=True)
        self.out = Linear(dim, dim, zero=zero_out)

    def param_dict(self) -> dict[str, Tensor]:
        return {name: p for name, p in self.named_parameters()}

    def forward(self, query: Tensor, value: Tensor, spec: LevelSpec, ref_points) -> Tensor:
        if len(spec) != self.levels:
            raise F.ShapeError(f"module built for {self.levels} levels, spec has {len(spec)}")
        return F.ms_deform_attn(query, value, spec, ref_points, self.param_dict(), self.heads, self.points)
