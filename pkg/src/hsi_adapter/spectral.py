"""Spectral transformer: per-pixel attention over band tokens.

Every band value at every pixel becomes a token. A shared scalar-to-vector
projection plus a learned per-band embedding lifts it to ``d_s`` dimensions,
a small pre-norm transformer mixes the ``N`` tokens of each pixel (never
across pixels), and the tokens are mean-pooled over bands and projected to a
3-channel pseudo-image for the frozen ViT patch embedding.
"""

from __future__ import annotations

from .nn.layers import Linear, TransformerBlock
from .nn.module import Module, Parameter
from .tensor import ShapeError, Tensor, concat, reshape, transpose


class SpectralTransformer(Module):
    def __init__(
        self,
        bands: int,
        dim: int = 32,
        heads: int = 4,
        layers: int = 2,
        mlp_ratio: float = 4.0,
        out_channels: int = 3,
    ):
        if dim % heads:
            raise ShapeError(f"spectral dim {dim} not divisible by {heads} heads")
        self.bands = bands
        self.embed = Linear(1, dim)
        self.band_embed = Parameter((bands, dim), ("trunc_normal", 0.02))
        self.blocks = [TransformerBlock(dim, heads, mlp_ratio) for _ in range(layers)]
        self.proj = Linear(dim, out_channels)

    def band_embed_tokens(self, x: Tensor) -> Tensor:
        """``[B, N, H, W]`` cube -> ``[B*H*W, N, d_s]`` tokens (pixel-major)."""
        B, N, H, W = x.shape
        if N != self.bands:
            raise ShapeError(f"cube has {N} bands, transformer built for {self.bands}")
        seq = reshape(transpose(x, (0, 2, 3, 1)), (B * H * W, N, 1))
        return self.embed(seq) + self.band_embed

    def encode(self, tokens: Tensor) -> Tensor:
        for blk in self.blocks:
            tokens = blk(tokens)
        return tokens

    def pool_project(self, tokens: Tensor, batch: int, height: int, width: int) -> Tensor:
        """Mean over band tokens, linear to output channels, back to ``[B, 3, H, W]``."""
        pooled = tokens.mean(axis=1)  # [B*H*W, d_s]
        img = self.proj(pooled)
        img = reshape(img, (batch, height, width, img.shape[-1]))
        return transpose(img, (0, 3, 1, 2))

    def _pixels(self, x: Tensor) -> Tensor:
        return self.encode(self.band_embed_tokens(x))

    def forward(self, x: Tensor, tile_rows: int | None = None) -> Tensor:
        """Pseudo-image ``[B, 3, H, W]``.

        ``tile_rows`` processes the cube in horizontal strips of that many
        rows; pixels are independent, so the result does not depend on it.
        """
        B, _, H, W = x.shape
        if tile_rows is None or tile_rows >= H:
            return self.pool_project(self._pixels(x), B, H, W)
        strips = []
        for r in range(0, H, tile_rows):
            part = x[:, :, r : r + tile_rows]
            h = part.shape[2]
            strips.append(self.pool_project(self._pixels(part), B, h, W))
        return concat(strips, axis=2)


def spectral_transform(model: SpectralTransformer, cube: Tensor, tile_rows: int | None = None) -> Tensor:
    return model(cube, tile_rows)


__all__ = ["SpectralTransformer", "spectral_transform"]
