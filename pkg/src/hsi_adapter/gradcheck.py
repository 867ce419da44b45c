"""Finite-difference gradient checks for every differentiable op and the full network.

Each registered op builds float64 inputs and a function of them. The check
contracts the op's output with a fixed random tensor to get a scalar, then
compares analytic gradients against central differences taken in float64:

* the 64-bit analytic gradient must agree to ``TOL64``;
* the 32-bit analytic gradient, evaluated at the float32-rounded inputs,
  must agree with the float64 estimate at the same point to ``TOL32``.

The error is ``‖analytic − numeric‖₂ / ‖numeric‖₂`` over the sampled
coordinates, and at least 100 coordinates are sampled per check.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .nn import functional as F
from .nn.functional import LevelSpec
from .tensor import Tensor, finite_diff_grad

TOL32 = 1e-3
TOL64 = 1e-6
MIN_COORDS = 100

Builder = Callable[[np.random.Generator], tuple[list[np.ndarray], Callable[..., Tensor]]]
OPS: dict[str, Builder] = {}


def register(name: str):
    def deco(fn: Builder) -> Builder:
        OPS[name] = fn
        return fn

    return deco


@dataclass
class CheckResult:
    name: str
    err32: float
    err64: float
    coords: int

    @property
    def passed(self) -> bool:
        return self.err32 < TOL32 and self.err64 < TOL64 and self.coords >= MIN_COORDS


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    num = np.linalg.norm(numeric)
    diff = np.linalg.norm(np.asarray(analytic, np.float64) - numeric)
    if num == 0.0:
        return float(diff)
    return float(diff / num)


def _sample_coords(sizes: list[int], n: int, rng: np.random.Generator) -> list[np.ndarray]:
    total = sum(sizes)
    if total <= n:
        return [np.arange(s) for s in sizes]
    picks = np.sort(rng.choice(total, size=n, replace=False))
    starts = np.cumsum([0] + sizes)
    return [picks[(picks >= a) & (picks < b)] - a for a, b in zip(starts[:-1], starts[1:])]


def check_function(name: str, arrays: list[np.ndarray], fn: Callable[..., Tensor], seed: int = 0,
                   n_coords: int = MIN_COORDS, eps: float = 1e-6) -> CheckResult:
    rng = np.random.default_rng(seed)
    arrays = [np.asarray(a, np.float64) for a in arrays]
    with T.no_grad():
        out_shape = fn(*[Tensor(a) for a in arrays]).shape
    proj = rng.standard_normal(out_shape)

    def scalar(ts, dtype):
        return (fn(*ts) * Tensor(proj.astype(dtype))).sum()

    coords = _sample_coords([a.size for a in arrays], n_coords, rng)
    errs = {}
    for dtype in (np.float64, np.float32):
        point = [a.astype(dtype).astype(np.float64) for a in arrays]
        ts = [Tensor(a.astype(dtype), requires_grad=True) for a in point]
        scalar(ts, dtype).backward()
        analytic, numeric = [], []
        probe = [Tensor(a) for a in point]
        for i, c in enumerate(coords):
            if len(c) == 0:
                continue
            grad = ts[i].grad if ts[i].grad is not None else np.zeros_like(ts[i].data)
            analytic.append(grad.reshape(-1)[c])
            numeric.append(finite_diff_grad(lambda _: scalar(probe, np.float64), probe[i], eps, c))
        errs[dtype] = rel_err(np.concatenate(analytic), np.concatenate(numeric))
    return CheckResult(name, errs[np.float32], errs[np.float64], int(sum(len(c) for c in coords)))


def check_op(name: str, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng([seed, len(name)])
    arrays, fn = OPS[name](rng)
    return check_function(name, arrays, fn, seed)


def run_op_suite(seed: int = 0, names=None) -> list[CheckResult]:
    return [check_op(n, seed) for n in (names or OPS)]


# -- registry ------------------------------------------------------------------

def _n(rng, *shape, lo=None):
    x = rng.standard_normal(shape)
    if lo is not None:  # keep magnitudes away from zero
        x = np.sign(x) * (np.abs(x) + lo)
    return x


@register("add")
def _(rng):
    return [_n(rng, 6, 20), _n(rng, 20)], T.add


@register("sub")
def _(rng):
    return [_n(rng, 6, 20), _n(rng, 6, 1)], T.sub


@register("mul")
def _(rng):
    return [_n(rng, 6, 20), _n(rng, 6, 20)], T.mul


@register("div")
def _(rng):
    return [_n(rng, 6, 20), _n(rng, 6, 20, lo=0.5)], T.div


@register("neg")
def _(rng):
    return [_n(rng, 120)], T.neg


@register("power")
def _(rng):
    return [np.abs(_n(rng, 120)) + 0.5], lambda x: T.power(x, 2.5)


@register("exp")
def _(rng):
    return [_n(rng, 120)], T.exp


@register("log")
def _(rng):
    return [np.abs(_n(rng, 120)) + 0.2], T.log


@register("sqrt")
def _(rng):
    return [np.abs(_n(rng, 120)) + 0.2], T.sqrt


@register("sum")
def _(rng):
    return [_n(rng, 4, 5, 6)], lambda x: T.tsum(x, axis=(0, 2), keepdims=True)


@register("mean")
def _(rng):
    return [_n(rng, 4, 5, 6)], lambda x: T.mean(x, axis=1)


@register("reshape")
def _(rng):
    return [_n(rng, 4, 5, 6)], lambda x: T.reshape(x, (20, 6))


@register("transpose")
def _(rng):
    return [_n(rng, 4, 5, 6)], lambda x: T.transpose(x, (2, 0, 1))


@register("getitem")
def _(rng):
    idx = np.array([0, 3, 3, 1])
    return [_n(rng, 5, 30)], lambda x: T.getitem(x, (idx, slice(2, 20)))


@register("concat")
def _(rng):
    return [_n(rng, 4, 15), _n(rng, 4, 10)], lambda a, b: T.concat([a, b], axis=1)


@register("split")
def _(rng):
    def fn(x):
        a, b = T.split(x, [7, 13], axis=1)
        return T.concat([b, a * 2.0], axis=1)

    return [_n(rng, 6, 20)], fn


@register("pad")
def _(rng):
    return [_n(rng, 2, 3, 5, 5)], lambda x: T.pad(x, [(0, 0), (0, 0), (1, 2), (0, 3)])


@register("matmul")
def _(rng):
    return [_n(rng, 2, 6, 12), _n(rng, 12, 9)], T.matmul


@register("linear")
def _(rng):
    return [_n(rng, 3, 5, 12), _n(rng, 8, 12), _n(rng, 8)], F.linear


@register("relu")
def _(rng):
    return [_n(rng, 120, lo=0.05)], F.relu


@register("gelu")
def _(rng):
    return [_n(rng, 120) * 2.0], F.gelu


@register("sigmoid")
def _(rng):
    return [_n(rng, 120) * 2.0], F.sigmoid


@register("softmax")
def _(rng):
    return [_n(rng, 4, 6, 7)], lambda x: F.softmax(x, axis=-1)


@register("layer_norm")
def _(rng):
    return [_n(rng, 4, 5, 16), 1.0 + 0.3 * _n(rng, 16), _n(rng, 16)], F.layer_norm


@register("batch_norm")
def _(rng):
    C = 4

    def fn(x, g, b):
        return F.batch_norm(x, g, b, np.zeros(C), np.ones(C), training=True)

    return [_n(rng, 3, C, 4, 5), 1.0 + 0.3 * _n(rng, C), _n(rng, C)], fn


@register("conv2d")
def _(rng):
    return [_n(rng, 2, 3, 7, 6), _n(rng, 4, 3, 3, 3), _n(rng, 4)], lambda x, w, b: F.conv2d(x, w, b, 2, 1)


@register("conv2d_grouped")
def _(rng):
    return [_n(rng, 2, 4, 6, 6), _n(rng, 4, 1, 3, 3)], lambda x, w: F.conv2d(x, w, None, 1, 1, groups=4)


@register("conv_transpose2d")
def _(rng):
    return [_n(rng, 2, 3, 4, 5), _n(rng, 3, 2, 2, 2), _n(rng, 2)], F.conv_transpose2d


@register("max_pool2d")
def _(rng):
    x = rng.permutation(2 * 3 * 8 * 8).reshape(2, 3, 8, 8) * 0.01  # distinct values, no ties
    return [x], F.max_pool2d


@register("resize_bilinear")
def _(rng):
    return [_n(rng, 2, 3, 5, 4)], lambda x: F.resize_bilinear(x, (9, 11))


@register("adaptive_avg_pool2d")
def _(rng):
    return [_n(rng, 2, 3, 7, 9)], lambda x: F.adaptive_avg_pool2d(x, 3)


@register("attention")
def _(rng):
    def fn(q, k, v):
        return F.scaled_dot_attention(q, k, v, heads=2)[0]

    return [_n(rng, 2, 5, 8), _n(rng, 2, 7, 8), _n(rng, 2, 7, 8)], fn


@register("bilinear_sample")
def _(rng):
    pts = rng.uniform(-0.1, 1.1, size=(2, 12, 2))
    return [_n(rng, 2, 3, 5, 6), pts], F.bilinear_sample


@register("ms_deform_attn")
def _(rng):
    D, heads, P = 8, 2, 2
    spec = LevelSpec(((4, 4), (2, 3)))
    L = len(spec)
    Tq = 5
    ref = rng.uniform(0.05, 0.95, size=(Tq, L, 2))
    shapes = {
        "value.weight": (D, D), "value.bias": (D,),
        "offsets.weight": (heads * L * P * 2, D), "offsets.bias": (heads * L * P * 2,),
        "weights.weight": (heads * L * P, D), "weights.bias": (heads * L * P,),
        "out.weight": (D, D), "out.bias": (D,),
    }
    names = list(shapes)
    arrays = [_n(rng, 2, Tq, D), _n(rng, 2, spec.total, D)] + [0.5 * _n(rng, *shapes[n]) for n in names]

    def fn(query, value, *ps):
        return F.ms_deform_attn(query, value, spec, ref, dict(zip(names, ps)), heads, P)

    return arrays, fn


@register("gate_blend")
def _(rng):
    return [_n(rng, 2, 6, 10), _n(rng, 2, 6, 10), rng.uniform(0.1, 0.9, size=(2, 6, 1))], F.gate_blend


@register("cross_entropy")
def _(rng):
    labels = rng.integers(0, 4, size=(2, 5, 6))
    labels[0, 0, :3] = F.IGNORE_LABEL
    return [_n(rng, 2, 4, 5, 6)], lambda z: F.cross_entropy(z, labels)


# -- full network ----------------------------------------------------------------

def tiny_model_config():
    from .config import ModelConfig

    return ModelConfig(
        dim=16, depth=4, vit_heads=2, stages=((0, 0), (1, 1), (2, 2), (3, 3)), patch=14, pretrain_size=28,
        d_s=8, spectral_heads=2, spectral_layers=1, spectral_mlp_ratio=2.0, stem_channels=8,
        stage_channels=(8, 16, 16), deform_heads=2, deform_points=2, final_extractors=3,
        decoder_channels=8, aux_channels=8,
    )


def randomized_model(bands: int, classes: int, seed: int = 0, cfg=None, dtype=np.float32):
    """A model whose zero/constant-initialized tensors are perturbed, so no branch is inert."""
    from .model import build_model

    model = build_model(bands, classes, cfg or tiny_model_config(), seed)
    rng = np.random.default_rng([seed, 0xF00D])
    for _, p in model.named_parameters():
        if p.init[0] in ("zeros", "ones", "const"):
            p.data += (0.2 * rng.standard_normal(p.shape)).astype(p.dtype)
    return model.astype(dtype) if dtype != np.float32 else model


def network_loss(model, cube: Tensor, labels: np.ndarray) -> Tensor:
    from .decoder import total_loss

    out = model(cube)
    loss, _ = total_loss(F.cross_entropy(out.logits, labels), F.cross_entropy(out.aux_logits, labels))
    return loss


def check_network(seed: int = 0, n_coords: int = 120, eps32: float = 1e-5, eps64: float = 1e-5,
                  bands: int = 4, classes: int = 3, hw=(32, 32)) -> list[CheckResult]:
    """End-to-end loss gradient w.r.t. sampled trainable parameters and input voxels.

    The 32-bit result uses ``eps32`` for the float64 reference; the 64-bit
    one uses ``eps64``. Steps much above 1e-5 let perturbations of early
    convolution weights carry activations across ReLU and max-pool kinks,
    which spoils the reference rather than exposing a gradient bug.
    """
    rng = np.random.default_rng([seed, 0xBEEF])
    m32 = randomized_model(bands, classes, seed)
    m64 = m32.astype(np.float64)
    cube = rng.uniform(0.0, 1.0, size=(2, bands, *hw)).astype(np.float32)
    labels = rng.integers(0, classes, size=(2, *hw))
    labels[:, :2, :5] = F.IGNORE_LABEL

    def targets(model, cube_t):
        return [cube_t] + [p for _, p in model.named_parameters() if p.requires_grad]

    results = []
    for tag, model, dtype, eps in (("network32", m32, np.float32, eps32), ("network64", m64, np.float64, eps64)):
        ref = m64
        cube_t = Tensor(cube.astype(dtype), requires_grad=True)
        network_loss(model, cube_t, labels).backward()
        probe_cube = Tensor(cube.astype(np.float64))
        ts, probes = targets(model, cube_t), targets(ref, probe_cube)
        crng = np.random.default_rng([seed, 7])
        coords = _sample_coords([t.size for t in ts], n_coords, crng)
        analytic, numeric = [], []
        for t, probe, c in zip(ts, probes, coords):
            if len(c) == 0:
                continue
            analytic.append(t.grad.reshape(-1)[c])
            numeric.append(finite_diff_grad(lambda _: network_loss(ref, probe_cube, labels), probe, eps, c))
        results.append(CheckResult(tag, np.nan, np.nan, int(sum(len(c) for c in coords))))
        err = rel_err(np.concatenate(analytic), np.concatenate(numeric))
        if dtype == np.float32:
            results[-1].err32, results[-1].err64 = err, 0.0
        else:
            results[-1].err32, results[-1].err64 = 0.0, err
    return results


def format_results(results: list[CheckResult]) -> str:
    lines = [f"{'check':<22}{'err32':>12}{'err64':>12}{'coords':>8}  status"]
    for r in results:
        lines.append(f"{r.name:<22}{r.err32:>12.3e}{r.err64:>12.3e}{r.coords:>8}  {'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
