"""Parameter containers.

A :class:`Module` discovers its parameters, buffers and submodules from its
attributes, in assignment order; lists of modules are named by index. Each
:class:`Parameter` carries an initialization recipe, and
:meth:`Module.initialize` draws every parameter from a generator keyed by
``(seed, parameter name)``, so a tensor's initial value does not depend on
which other parameters exist.
"""

from __future__ import annotations

import copy
import zlib
from typing import Iterator

import numpy as np

from ..tensor import DEFAULT_DTYPE, Tensor, truncated_normal


class Parameter(Tensor):
    """A learnable leaf tensor with an initialization recipe.

    Recipes: ``("zeros",)``, ``("ones",)``, ``("const", v)``,
    ``("trunc_normal", std)``, ``("kaiming", fan_in)``, ``("uniform", lo, hi)``.
    """

    __slots__ = ("init",)

    def __init__(self, shape, init=("trunc_normal", 0.02), dtype=DEFAULT_DTYPE):
        super().__init__(np.zeros(tuple(shape), dtype=dtype), requires_grad=True)
        self.init = tuple(init)

    def reset(self, rng: np.random.Generator) -> None:
        kind, *args = self.init
        shape = self.data.shape
        if kind == "zeros":
            vals = np.zeros(shape)
        elif kind == "ones":
            vals = np.ones(shape)
        elif kind == "const":
            vals = np.full(shape, args[0])
        elif kind == "trunc_normal":
            vals = truncated_normal(rng, shape, args[0])
        elif kind == "kaiming":
            vals = rng.standard_normal(shape) * np.sqrt(2.0 / args[0])
        elif kind == "uniform":
            vals = rng.uniform(args[0], args[1], size=shape)
        else:
            raise ValueError(f"unknown init recipe {self.init}")
        self.data[...] = vals


def name_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())])


class Module:
    training: bool = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(val, (list, tuple)) and val and all(isinstance(v, Module) for v in val):
                for i, v in enumerate(val):
                    yield f"{key}.{i}", v
            else:
                yield key, val

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in self._children():
            if isinstance(val, Parameter):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, val in self._children():
            if isinstance(val, np.ndarray):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_buffers(f"{prefix}{key}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, val in self._children():
            if isinstance(val, Module):
                yield from val.modules()

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def initialize(self, seed: int) -> "Module":
        for name, p in self.named_parameters():
            p.reset(name_rng(seed, name))
        return self

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.named_parameters()}
        out.update(dict(self.named_buffers()))
        return out

    def astype(self, dtype) -> "Module":
        """Deep copy with every parameter and buffer cast to ``dtype``."""
        clone = copy.deepcopy(self)
        for _, p in clone.named_parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for m in clone.modules():
            for key, val in list(vars(m).items()):
                if isinstance(val, np.ndarray) and val.dtype.kind == "f":
                    setattr(m, key, val.astype(dtype))
        return clone

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None
