"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a C-contiguous numpy array. Every differentiable
operation that touches a tensor with ``requires_grad`` records its parents and
a closure mapping the output gradient to one gradient per parent.
:meth:`Tensor.backward` replays those closures in reverse topological order,
accumulating gradients additively across fan-out.

Storage and compute are float32. Float64 tensors flow through the same code
unchanged; that path exists for finite-difference oracles only.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_grad_enabled = True


class ShapeError(ValueError):
    """Operand extents are incompatible with the requested operation."""


class ContractError(RuntimeError):
    """A precondition of an operation was violated by the caller."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "retains_grad", "op", "_parents", "_backward")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.retains_grad = False
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def retain_grad(self) -> "Tensor":
        self.retains_grad = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg}, op={self.op})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autodiff ----------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Populate ``.grad`` on every reachable leaf that requires grad.

        Intermediate nodes keep their gradient only when ``retain_grad()`` was
        called on them. The graph is released as it is consumed.
        """
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return
        order = _topological_order(self)
        pending: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None or node.retains_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise ShapeError(
                        f"{node.op}: gradient shape {pg.shape} != input shape {parent.shape}"
                    )
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg
            node._backward = None
            node._parents = ()

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap ``data`` as the output of a differentiable op.

    ``backward(g)`` must return one gradient (or None) per parent, in order.
    """
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _coerce_pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


# -- creation -------------------------------------------------------------

def _check_extents(shape) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ShapeError(f"all extents must be positive, got {shape}")
    return shape


def truncated_normal(rng: np.random.Generator, shape, std: float, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) samples redrawn until they fall inside ±bound·std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


def tensor_create(
    shape,
    init: str = "zeros",
    *,
    seed: int = 0,
    lo: float = -1.0,
    hi: float = 1.0,
    std: float = 1.0,
    dtype=DEFAULT_DTYPE,
    requires_grad: bool = False,
) -> Tensor:
    """Create a tensor with deterministic contents.

    ``init`` is one of ``zeros``, ``ones``, ``uniform`` (``seed``, ``lo``,
    ``hi``) or ``trunc_normal`` (``seed``, ``std``, truncated at two standard
    deviations).
    """
    shape = _check_extents(shape)
    if init == "zeros":
        data = np.zeros(shape, dtype=dtype)
    elif init == "ones":
        data = np.ones(shape, dtype=dtype)
    elif init == "uniform":
        data = np.random.default_rng(seed).uniform(lo, hi, size=shape).astype(dtype)
    elif init == "trunc_normal":
        data = truncated_normal(np.random.default_rng(seed), shape, std).astype(dtype)
    else:
        raise ValueError(f"unknown init {init!r}")
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad=False) -> Tensor:
    return tensor_create(shape, "zeros", dtype=dtype, requires_grad=requires_grad)


def ones(shape, dtype=DEFAULT_DTYPE, requires_grad=False) -> Tensor:
    return tensor_create(shape, "ones", dtype=dtype, requires_grad=requires_grad)


# -- elementwise arithmetic ----------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)

    def backward(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return make_result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)

    def backward(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return make_result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return make_result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = a.data / b.data

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None,
        )

    return make_result(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    out = a.data ** p

    def backward(g):
        return (g * p * a.data ** (p - 1.0),)

    return make_result(out, (a,), backward, "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return make_result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


# -- reductions -----------------------------------------------------------

def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_result(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axes, keepdims) * (1.0 / count)


# -- shape manipulation ---------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return make_result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(ax % a.ndim for ax in axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return make_result(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    if isinstance(idx, Tensor):
        idx = idx.data
    out = np.ascontiguousarray(a.data[idx])
    basic = _is_basic_index(idx)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return make_result(out, (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        grads = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if not t.requires_grad:
                grads.append(None)
                continue
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            grads.append(np.ascontiguousarray(g[tuple(sl)]))
        return grads

    return make_result(out, tensors, backward, "concat")


def split(a: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    axis = axis % a.ndim
    if sum(sizes) != a.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover extent {a.shape[axis]}")
    parts, lo = [], 0
    for s in sizes:
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(lo, lo + s)
        parts.append(getitem(a, tuple(sl)))
        lo += s
    return parts


def pad(a: Tensor, widths: Sequence[tuple[int, int]], value: float = 0.0) -> Tensor:
    """Constant padding; ``widths`` has one (before, after) pair per axis."""
    widths = [tuple(w) for w in widths]
    if all(w == (0, 0) for w in widths):
        return a
    out = np.pad(a.data, widths, mode="constant", constant_values=value)
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return make_result(out, (a,), lambda g: (np.ascontiguousarray(g[sl]),), "pad")


# -- linear algebra -------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _coerce_pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return make_result(out, (a, b), backward, "matmul")


# -- gradient oracle ------------------------------------------------------

def finite_diff_grad(
    f: Callable[[Tensor], Tensor | float],
    x: Tensor,
    eps: float = 1e-3,
    coords: Iterable[int] | None = None,
) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, in float64.

    ``x`` is temporarily replaced by a float64 copy while ``f`` is evaluated;
    whatever else ``f`` closes over should also be float64 for the estimate
    to be meaningful. With ``coords`` (flat indices) only those coordinates
    are estimated and a 1-D array is returned; otherwise the result has the
    shape of ``x``.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    original = x.data
    work = np.array(original, dtype=np.float64)
    flat = work.reshape(-1)
    idx = list(range(flat.size)) if coords is None else [int(c) for c in coords]
    est = np.zeros(len(idx), dtype=np.float64)

    def evaluate() -> float:
        val = f(x)
        return float(val.item() if isinstance(val, Tensor) else val)

    try:
        x.data = work
        with no_grad():
            for j, i in enumerate(idx):
                keep = flat[i]
                flat[i] = keep + eps
                fp = evaluate()
                flat[i] = keep - eps
                fm = evaluate()
                flat[i] = keep
                est[j] = (fp - fm) / (2.0 * eps)
    finally:
        x.data = original
    return est.reshape(original.shape) if coords is None else est
