"""Differentiable neural-network primitives.

Each function takes and returns :class:`~hsi_adapter.tensor.Tensor` objects.
Feature maps are laid out ``[B, C, H, W]`` and token sequences ``[B, T, D]``.
Fused primitives (linear, norms, convolutions, sampling, cross-entropy) carry
hand-written backward passes; the rest is composed from tensor-core ops.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from ..tensor import (
    ContractError,
    ShapeError,
    Tensor,
    as_tensor,
    concat,
    make_result,
    matmul,
    pad,
    reshape,
    transpose,
)

IGNORE_LABEL = 255


class LabelError(ValueError):
    """A label value lies outside ``[0, C)`` and is not the ignore label."""


# -- dense layers and activations ------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis; ``weight`` is ``[out, in]``."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input dim {x.shape[-1]} != weight in-dim {weight.shape[1]}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data.T
    if bias is not None:
        out += bias.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ weight.data).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = col_sum(g2) if bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out.reshape(*lead, weight.shape[0]), parents, backward, "linear")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


def gelu(x: Tensor) -> Tensor:
    """GELU in its tanh form, ``0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))``."""
    v = x.data
    x2 = v * v
    th = np.tanh((x2 * _GELU_K + 1.0) * v * _GELU_C)
    out = (th + 1.0) * v
    out *= 0.5

    def backward(g):
        # d/dx = 0.5(1 + th) + 0.5 x (1 - th²) c (1 + 3k x²)
        inner = (x2 * (3.0 * _GELU_K) + 1.0) * _GELU_C
        sech2 = 1.0 - th * th
        d = sech2 * inner
        d *= v
        d += th
        d += 1.0
        d *= 0.5
        d *= g
        return (d,)

    return make_result(out, (x,), backward, "gelu")


def row_sum(a: np.ndarray) -> np.ndarray:
    """Sum over the last axis with keepdims, as a matrix-vector product."""
    return a @ np.ones((a.shape[-1], 1), dtype=a.dtype)


def col_sum(a2: np.ndarray) -> np.ndarray:
    """Sum over the rows of a 2-D array."""
    return np.ones(a2.shape[0], dtype=a2.dtype) @ a2


def sigmoid(x: Tensor) -> Tensor:
    out = special.expit(x.data)
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    last = axis in (-1, x.ndim - 1)
    total = row_sum if last else (lambda a: a.sum(axis=axis, keepdims=True))
    e = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(e, out=e)
    e /= total(e)
    out = e

    def backward(g):
        gx = g - total(g * out)
        gx *= out
        return (gx,)

    return make_result(out, (x,), backward, "softmax")


# -- normalization ---------------------------------------------------------

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    D = x.shape[-1]
    inv_d = 1.0 / D
    xc = x.data - row_sum(x.data) * inv_d
    var = row_sum(xc * xc) * inv_d
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc
    xhat *= rstd
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = dxhat - row_sum(dxhat) * inv_d
            gx -= xhat * (row_sum(dxhat * xhat) * inv_d)
            gx *= rstd
        flat_g = g.reshape(-1, D)
        gg = col_sum(flat_g * xhat.reshape(flat_g.shape)) if gamma.requires_grad else None
        gb = col_sum(flat_g) if beta.requires_grad else None
        return gx, gg, gb

    return make_result(out, (x, gamma, beta), backward, "layer_norm")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalization over ``[B, H, W]`` per channel.

    In training mode the batch statistics normalize the input and the running
    estimates are updated in place (unbiased variance, ``momentum`` 0.1).
    """
    axes = (0, 2, 3)
    shape = (1, -1, 1, 1)
    count = x.shape[0] * x.shape[2] * x.shape[3]
    if training:
        if count <= 1:
            raise ContractError("batch_norm in training mode needs more than one value per channel")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (count / (count - 1))
    else:
        mu, var = running_mean, running_var
    rstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    mu = mu.astype(x.dtype)
    xhat = (x.data - mu.reshape(shape)) * rstd.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def backward(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(shape)
            if training:
                gx = rstd.reshape(shape) * (
                    dxhat
                    - dxhat.mean(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)
                )
            else:
                gx = dxhat * rstd.reshape(shape)
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        return gx, gg, gb

    return make_result(out, (x, gamma, beta), backward, "batch_norm")


# -- convolution and pooling ----------------------------------------------

def _conv_out(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation; ``weight`` is ``[C_out, C_in/groups, kh, kw]``.

    ``groups == C_in`` gives a depthwise convolution.
    """
    B, C, H, W = x.shape
    Cout, Cg, kh, kw = weight.shape
    if C % groups or Cout % groups or Cg != C // groups:
        raise ShapeError(
            f"conv2d: {C} input channels, weight {weight.shape}, groups={groups} are inconsistent"
        )
    s, p = int(stride), int(padding)
    Ho, Wo = _conv_out(H, kh, s, p), _conv_out(W, kw, s, p)
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} does not fit padded input {H}x{W} (pad {p})")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, : (Ho - 1) * s + 1 : s, : (Wo - 1) * s + 1 : s]
    # cols: [groups, B*Ho*Wo, Cg*kh*kw]
    cols = win.reshape(B, groups, Cg, Ho, Wo, kh, kw).transpose(1, 0, 3, 4, 2, 5, 6)
    cols = np.ascontiguousarray(cols).reshape(groups, B * Ho * Wo, Cg * kh * kw)
    wmat = weight.data.reshape(groups, Cout // groups, Cg * kh * kw)
    out = np.matmul(cols, wmat.transpose(0, 2, 1))  # [G, P, Og]
    out = out.reshape(groups, B, Ho, Wo, Cout // groups).transpose(1, 0, 4, 2, 3).reshape(B, Cout, Ho, Wo)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)

    def backward(g):
        g3 = g.reshape(B, groups, Cout // groups, Ho, Wo).transpose(1, 0, 3, 4, 2)
        g3 = np.ascontiguousarray(g3).reshape(groups, B * Ho * Wo, Cout // groups)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.matmul(g3.transpose(0, 2, 1), cols).reshape(weight.shape)
        if x.requires_grad:
            dcols = np.matmul(g3, wmat).reshape(groups, B, Ho, Wo, Cg, kh, kw)
            dcols = dcols.transpose(1, 0, 4, 2, 3, 5, 6).reshape(B, C, Ho, Wo, kh, kw)
            dxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + s * (Ho - 1) + 1 : s, j : j + s * (Wo - 1) + 1 : s] += dcols[..., i, j]
            gx = dxp[:, :, p : p + H, p : p + W] if p else dxp
            gx = np.ascontiguousarray(gx)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "conv2d")


def conv_transpose2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 2,
    padding: int = 0,
) -> Tensor:
    """Transposed convolution; ``weight`` is ``[C_in, C_out, kh, kw]``.

    Output extent is ``(H - 1) * stride + k - 2 * padding``.
    """
    B, C, H, W = x.shape
    Cin, Cout, kh, kw = weight.shape
    if Cin != C:
        raise ShapeError(f"conv_transpose2d: input has {C} channels, weight expects {Cin}")
    s, p = int(stride), int(padding)
    if s < 1:
        raise ContractError("stride must be >= 1")
    Hf, Wf = (H - 1) * s + kh, (W - 1) * s + kw
    Ho, Wo = Hf - 2 * p, Wf - 2 * p
    if Ho <= 0 or Wo <= 0:
        raise ShapeError("conv_transpose2d: padding removes the whole output")
    x2 = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(-1, C)
    wmat = weight.data.reshape(Cin, Cout * kh * kw)
    cols = (x2 @ wmat).reshape(B, H, W, Cout, kh, kw)
    full = np.zeros((B, Cout, Hf, Wf), dtype=np.result_type(x.dtype, weight.dtype))
    for i in range(kh):
        for j in range(kw):
            full[:, :, i : i + s * (H - 1) + 1 : s, j : j + s * (W - 1) + 1 : s] += cols[..., i, j].transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(full[:, :, p : p + Ho, p : p + Wo])
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)

    def backward(g):
        gfull = np.pad(g, ((0, 0), (0, 0), (p, p), (p, p))) if p else g
        dcols = np.empty((B, H, W, Cout, kh, kw), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dcols[..., i, j] = gfull[:, :, i : i + s * (H - 1) + 1 : s, j : j + s * (W - 1) + 1 : s].transpose(0, 2, 3, 1)
        dcols = dcols.reshape(-1, Cout * kh * kw)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.ascontiguousarray((dcols @ wmat.T).reshape(B, H, W, C).transpose(0, 3, 1, 2))
        if weight.requires_grad:
            gw = (x2.T @ dcols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "conv_transpose2d")


def max_pool2d(x: Tensor, kernel: int = 3, stride: int = 2, padding: int = 1) -> Tensor:
    """Window maximum; ties route the gradient to the first element in row-major order."""
    if kernel < 1:
        raise ContractError("kernel must be >= 1")
    B, C, H, W = x.shape
    k, s, p = int(kernel), int(stride), int(padding)
    Ho, Wo = _conv_out(H, k, s, p), _conv_out(W, k, s, p)
    if Ho <= 0 or Wo <= 0:
        raise ShapeError("max_pool2d: window does not fit input")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=-np.inf) if p else x.data
    Hp, Wp = xp.shape[2], xp.shape[3]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, : (Ho - 1) * s + 1 : s, : (Wo - 1) * s + 1 : s]
    win = win.reshape(B, C, Ho, Wo, k * k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        rows = np.arange(Ho).reshape(1, 1, Ho, 1) * s + arg // k
        colm = np.arange(Wo).reshape(1, 1, 1, Wo) * s + arg % k
        plane = np.arange(B * C).reshape(B, C, 1, 1) * (Hp * Wp)
        flat = (plane + rows * Wp + colm).ravel()
        acc = np.bincount(flat, weights=g.ravel(), minlength=B * C * Hp * Wp)
        acc = acc.reshape(B, C, Hp, Wp)[:, :, p : p + H, p : p + W]
        return (np.ascontiguousarray(acc, dtype=x.dtype),)

    return make_result(np.ascontiguousarray(out), (x,), backward, "max_pool2d")


# -- resampling as separable linear maps -----------------------------------

def bilinear_matrix(n_in: int, n_out: int, dtype=np.float32) -> np.ndarray:
    """``[n_out, n_in]`` interpolation matrix, align-corners-false, edge clamped."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[o, i0] += 1.0 - lam
        m[o, i1] += lam
    return m.astype(dtype)


def adaptive_pool_matrix(n_in: int, n_out: int, dtype=np.float32) -> np.ndarray:
    """``[n_out, n_in]`` averaging matrix with the usual adaptive-pool bin edges."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    for o in range(n_out):
        lo = (o * n_in) // n_out
        hi = -((-(o + 1) * n_in) // n_out)
        m[o, lo:hi] = 1.0 / (hi - lo)
    return m.astype(dtype)


def _separable(x: Tensor, mh: np.ndarray, mw: np.ndarray) -> Tensor:
    y = matmul(x, Tensor(np.ascontiguousarray(mw.T)))
    return matmul(Tensor(mh), y)


def resize_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    H, W = x.shape[-2:]
    Ho, Wo = size
    if (H, W) == (Ho, Wo):
        return x
    return _separable(x, bilinear_matrix(H, Ho, x.dtype), bilinear_matrix(W, Wo, x.dtype))


def adaptive_avg_pool2d(x: Tensor, size: int | tuple[int, int]) -> Tensor:
    if isinstance(size, int):
        size = (size, size)
    H, W = x.shape[-2:]
    return _separable(x, adaptive_pool_matrix(H, size[0], x.dtype), adaptive_pool_matrix(W, size[1], x.dtype))


# -- attention ------------------------------------------------------------

def split_heads(x: Tensor, heads: int) -> Tensor:
    B, T, D = x.shape
    if D % heads:
        raise ShapeError(f"dim {D} not divisible by {heads} heads")
    return transpose(reshape(x, (B, T, heads, D // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    B, h, T, dh = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (B, T, h * dh))


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> tuple[Tensor, Tensor]:
    """Per-head softmax(q kᵀ / √d_head) v. Returns (output [B,Tq,D], weights [B,h,Tq,Tk])."""
    if q.shape[-1] % heads:
        raise ShapeError(f"dim {q.shape[-1]} not divisible by {heads} heads")
    dh = q.shape[-1] // heads
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    scores = matmul(qh, transpose(kh, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    weights = softmax(scores, axis=-1)
    return merge_heads(matmul(weights, vh)), weights


# -- bilinear sampling and deformable attention ----------------------------

@dataclass(frozen=True)
class LevelSpec:
    """Ordered multi-scale grid description; ``offsets`` are prefix sums of H·W."""

    levels: tuple[tuple[int, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple((int(h), int(w)) for h, w in self.levels))
        if not self.levels or any(h <= 0 or w <= 0 for h, w in self.levels):
            raise ShapeError(f"invalid level extents {self.levels}")

    @property
    def offsets(self) -> tuple[int, ...]:
        acc = [0]
        for h, w in self.levels:
            acc.append(acc[-1] + h * w)
        return tuple(acc)

    @property
    def total(self) -> int:
        return self.offsets[-1]

    def __len__(self) -> int:
        return len(self.levels)


def make_reference_points(spec: LevelSpec) -> np.ndarray:
    """Normalized ``(x, y)`` pixel-center coordinates for every cell of every level.

    Returns ``[spec.total, 2]`` in row-major order, levels concatenated.
    """
    pts = []
    for h, w in spec.levels:
        ys, xs = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
        pts.append(np.stack([xs.ravel(), ys.ravel()], axis=-1))
    return np.concatenate(pts, axis=0)


def bilinear_sample(value: Tensor, points: Tensor) -> Tensor:
    """Sample ``value [N, C, H, W]`` at ``points [N, Q, 2]`` (normalized x, y).

    Pixel ``(i, j)`` has its center at ``((j + 0.5) / W, (i + 0.5) / H)``; taps
    outside the grid read zero. Returns ``[N, Q, C]``. Differentiable with
    respect to both the values and the point coordinates.
    """
    N, C, H, W = value.shape
    if points.shape[0] != N or points.shape[-1] != 2:
        raise ShapeError(f"points {points.shape} do not match value {value.shape}")
    Q = points.shape[1]
    px = points.data[..., 0] * W - 0.5
    py = points.data[..., 1] * H - 0.5
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = (px - x0).astype(value.dtype)
    fy = (py - y0).astype(value.dtype)
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    rows = np.ascontiguousarray(value.data.reshape(N, C, H * W).transpose(0, 2, 1)).reshape(N * H * W, C)
    base = (np.arange(N) * (H * W))[:, None]

    corners = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        yi, xi = y0 + dy, x0 + dx
        valid = (yi >= 0) & (yi < H) & (xi >= 0) & (xi < W)
        flat = base + np.clip(yi, 0, H - 1) * W + np.clip(xi, 0, W - 1)
        wy = fy if dy else 1.0 - fy
        wx = fx if dx else 1.0 - fx
        corners.append((flat, valid, wy, wx))

    def gather(flat, valid):
        return rows[flat] * valid[..., None]

    taps = [gather(flat, valid) for flat, valid, _, _ in corners]
    out = np.zeros((N, Q, C), dtype=value.dtype)
    for tap, (_, _, wy, wx) in zip(taps, corners):
        out += tap * (wy * wx)[..., None]

    def backward(g):
        gv = gp = None
        if value.requires_grad:
            acc = np.zeros_like(rows)
            for flat, valid, wy, wx in corners:
                np.add.at(acc, flat.ravel(), (g * (wy * wx * valid)[..., None]).reshape(-1, C))
            gv = np.ascontiguousarray(acc.reshape(N, H * W, C).transpose(0, 2, 1)).reshape(value.shape)
        if points.requires_grad:
            v00, v01, v10, v11 = taps
            dfx = ((v01 - v00) * (1.0 - fy)[..., None] + (v11 - v10) * fy[..., None])
            dfy = ((v10 - v00) * (1.0 - fx)[..., None] + (v11 - v01) * fx[..., None])
            gp = np.empty(points.shape, dtype=points.dtype)
            gp[..., 0] = (g * dfx).sum(axis=-1) * W
            gp[..., 1] = (g * dfy).sum(axis=-1) * H
        return gv, gp

    return make_result(out, (value, points), backward, "bilinear_sample")


def ms_deform_attn_core(
    value: Tensor,
    spec: LevelSpec,
    locations: Tensor,
    weights: Tensor,
) -> Tensor:
    """Weighted sum of bilinear samples over levels and points.

    ``value``: ``[B, T_v, heads, d_head]`` flattened over ``spec``;
    ``locations``: ``[B, T_q, heads, L, P, 2]`` normalized;
    ``weights``: ``[B, T_q, heads, L, P]``. Returns ``[B, T_q, heads * d_head]``.
    """
    B, Tv, heads, dh = value.shape
    if Tv != spec.total:
        raise ShapeError(f"value length {Tv} != level spec total {spec.total}")
    _, Tq, _, L, P, _ = locations.shape
    if L != len(spec):
        raise ShapeError(f"locations carry {L} levels, spec has {len(spec)}")
    offs = spec.offsets
    acc = None
    for lvl, (h, w) in enumerate(spec.levels):
        v_l = value[:, offs[lvl] : offs[lvl + 1]]  # [B, hw, heads, dh]
        v_l = reshape(transpose(v_l, (0, 2, 3, 1)), (B * heads, dh, h, w))
        loc = transpose(locations[:, :, :, lvl], (0, 2, 1, 3, 4))  # [B, heads, Tq, P, 2]
        loc = reshape(loc, (B * heads, Tq * P, 2))
        sampled = bilinear_sample(v_l, loc)  # [B*heads, Tq*P, dh]
        w_l = reshape(transpose(weights[:, :, :, lvl], (0, 2, 1, 3)), (B * heads, Tq * P, 1))
        term = reshape(sampled * w_l, (B * heads, Tq, P, dh)).sum(axis=2)
        acc = term if acc is None else acc + term
    out = transpose(reshape(acc, (B, heads, Tq, dh)), (0, 2, 1, 3))
    return reshape(out, (B, Tq, heads * dh))


def ms_deform_attn(
    query: Tensor,
    value_in: Tensor,
    spec: LevelSpec,
    ref_points: np.ndarray | Tensor,
    params: dict[str, Tensor],
    heads: int = 8,
    points: int = 4,
) -> Tensor:
    """Multi-scale deformable attention.

    Per head, sampling offsets and attention weights are linear in the
    query; weights are softmax-normalized jointly over levels × points.
    ``ref_points`` is ``[T_q, L, 2]`` (or ``[B, T_q, L, 2]``) in ``[0, 1]``;
    offsets are in cells of each level. ``params`` holds ``value``,
    ``offsets``, ``weights`` and ``out`` projections as
    ``{name}.weight``/``{name}.bias``.
    """
    B, Tq, D = query.shape
    L = len(spec)
    if value_in.shape[1] != spec.total:
        raise ShapeError(f"value length {value_in.shape[1]} != level spec total {spec.total}")
    if D % heads:
        raise ShapeError(f"dim {D} not divisible by {heads} heads")
    dh = value_in.shape[-1] // heads
    value = linear(value_in, params["value.weight"], params["value.bias"])
    value = reshape(value, (B, spec.total, heads, dh))
    off = linear(query, params["offsets.weight"], params["offsets.bias"])
    P = points
    off = reshape(off, (B, Tq, heads, L, P, 2))
    logits = linear(query, params["weights.weight"], params["weights.bias"])
    attn = reshape(softmax(reshape(logits, (B, Tq, heads, L * P)), axis=-1), (B, Tq, heads, L, P))
    ref = as_tensor(ref_points, dtype=query.dtype)
    if ref.ndim == 3:
        ref = reshape(ref, (1, *ref.shape))
    extent = np.array([[w, h] for h, w in spec.levels], dtype=query.dtype)  # [L, 2] as (x, y)
    loc = reshape(ref, (ref.shape[0], Tq, 1, L, 1, 2)) + off * Tensor(1.0 / extent.reshape(1, 1, 1, L, 1, 2))
    out = ms_deform_attn_core(value, spec, loc, attn)
    return linear(out, params["out.weight"], params["out.bias"])


# -- modality gate ---------------------------------------------------------

def gate_blend(x_vit: Tensor, x_injected: Tensor, gamma: Tensor) -> Tensor:
    """Per-token convex combination ``γ·x_injected + (1 − γ)·x_vit``.

    ``gamma`` is ``[..., 1]`` and broadcasts over the feature axis. The
    forward pass is evaluated so that it is exact at ``γ = 0``, at ``γ = 1``
    and when ``x_injected == x_vit``, and never leaves the segment between
    the two inputs.
    """
    if x_vit.shape != x_injected.shape:
        raise ShapeError(f"gate inputs differ in shape: {x_vit.shape} vs {x_injected.shape}")
    a, b, t = x_vit.data, x_injected.data, gamma.data
    out = a + t * (b - a)
    out = np.where(t == 1.0, b, out)
    out = np.clip(out, np.minimum(a, b), np.maximum(a, b))

    def backward(g):
        return (
            g * (1.0 - t) if x_vit.requires_grad else None,
            g * t if x_injected.requires_grad else None,
            (g * (b - a)).sum(axis=-1, keepdims=True) if gamma.requires_grad else None,
        )

    return make_result(out, (x_vit, x_injected, gamma), backward, "gate_blend")


# -- loss -----------------------------------------------------------------

class AllIgnoredWarning(UserWarning):
    """Every pixel of a batch carried the ignore label."""


def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_label: int = IGNORE_LABEL) -> Tensor:
    """Mean pixel-wise cross-entropy over non-ignored pixels.

    ``logits`` is ``[B, C, H, W]`` and ``labels`` ``[B, H, W]`` integers.
    """
    labels = np.asarray(labels)
    B, C = logits.shape[:2]
    if labels.shape != (B, *logits.shape[2:]):
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    keep = labels != ignore_label
    bad = keep & ((labels < 0) | (labels >= C))
    if bad.any():
        raise LabelError(f"label values outside [0, {C}) that are not the ignore label {ignore_label}")
    n = int(keep.sum())
    if n == 0:
        warnings.warn("all pixels carry the ignore label; loss is 0", AllIgnoredWarning, stacklevel=2)
        return make_result(np.zeros((), dtype=logits.dtype), (logits,), lambda g: (np.zeros_like(logits.data),), "cross_entropy")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    safe = np.where(keep, labels, 0)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    loss = -(picked * keep).sum() / n

    def backward(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
        grad = (p - onehot) * keep[:, None] * (g / n)
        return (grad.astype(logits.dtype, copy=False),)

    return make_result(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")


def pad_to_multiple(x: Tensor, multiple: int) -> tuple[Tensor, tuple[int, int]]:
    """Zero-pad the bottom/right of ``[..., H, W]`` to a multiple; returns padded and original size."""
    H, W = x.shape[-2:]
    ph, pw = (-H) % multiple, (-W) % multiple
    if ph == 0 and pw == 0:
        return x, (H, W)
    widths = [(0, 0)] * (x.ndim - 2) + [(0, ph), (0, pw)]
    return pad(x, widths), (H, W)


def cat_channels(maps: Sequence[Tensor]) -> Tensor:
    return concat(maps, axis=1)
