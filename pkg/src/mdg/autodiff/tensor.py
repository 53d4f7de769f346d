"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation that touches a tensor with ``requires_grad`` records a node
holding its parents and a closure mapping the output gradient to parent
gradients. ``Tensor.backward`` walks the recorded graph once in reverse
topological order. Inside :func:`no_grad` nothing is recorded, which is how
inference graphs are kept non-differentiable.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from mdg.errors import ContractError, DomainError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording for the enclosed block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse mode."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"
        self.name = name

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple["Tensor", ...], backward: BackwardFn, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.op = op
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _bad_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- backward ---------------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward() on a tensor with no recorded graph (built under no_grad or from constants)")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                g = np.array(g, dtype=np.float64)
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg

    # -- operator sugar -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return pow_const(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis, keepdims=False):
        return max_(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)

    def sin(self):
        return sin(self)

    def cos(self):
        return cos(self)

    def abs(self):
        return abs_(self)


def _bad_item(t: Tensor) -> float:
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


# ---------------------------------------------------------------------------
# elementwise binary
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return Tensor._result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return Tensor._result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return Tensor._result(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return Tensor._result(out, (a, b), backward, "div")


# ---------------------------------------------------------------------------
# elementwise unary
# ---------------------------------------------------------------------------

def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    x = a.data
    return Tensor._result(np.log(x), (a,), lambda g: (g / x,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(a.data)
    return Tensor._result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor._result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return Tensor._result(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return Tensor._result(out, (a,), backward, "gelu")


def sin(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return Tensor._result(np.sin(x), (a,), lambda g: (g * np.cos(x),), "sin")


def cos(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return Tensor._result(np.cos(x), (a,), lambda g: (-g * np.sin(x),), "cos")


def abs_(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return Tensor._result(np.abs(x), (a,), lambda g: (g * np.sign(x),), "abs")


def pow_const(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    x = a.data
    p = float(exponent)
    if p != int(p) and np.any(x < 0):
        raise DomainError("fractional power of a negative value")
    return Tensor._result(x**p, (a,), lambda g: (g * p * x ** (p - 1.0),), "pow_const")


def wrap_angle(a) -> Tensor:
    """Wrap into (-pi, pi]; derivative is 1 almost everywhere."""
    a = as_tensor(a)
    return Tensor._result(wrap_angle_np(a.data), (a,), lambda g: (g,), "wrap_angle")


def wrap_angle_np(x):
    y = np.mod(np.asarray(x) + np.pi, 2.0 * np.pi) - np.pi
    return np.where(y == -np.pi, np.pi, y)


_UNARY = {
    "neg": neg, "exp": exp, "log": log, "sqrt": sqrt, "tanh": tanh, "relu": relu,
    "gelu": gelu, "sin": sin, "cos": cos,
}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op_tag: str, a, b=None, exponent: float | None = None) -> Tensor:
    """Dispatch an elementwise op by name."""
    if op_tag in _BINARY:
        if b is None:
            raise ContractError(f"{op_tag} needs two operands")
        return _BINARY[op_tag](a, b)
    if op_tag in _UNARY:
        return _UNARY[op_tag](a)
    if op_tag == "pow_const":
        if exponent is None:
            raise ContractError("pow_const needs an exponent")
        return pow_const(a, exponent)
    raise ContractError(f"unknown elementwise op {op_tag!r}")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return Tensor._result(np.asarray(out), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return sum_(a, axes, keepdims) * (1.0 / count)


def max_(a, axis: int, keepdims=False) -> Tensor:
    """Max along one axis; gradient routes to the first maximiser."""
    a = as_tensor(a)
    ax = axis % a.ndim
    idx = np.expand_dims(np.argmax(a.data, axis=ax), ax)
    out = np.take_along_axis(a.data, idx, axis=ax)
    shape = a.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        full = np.zeros(shape)
        np.put_along_axis(full, idx, g, axis=ax)
        return (full,)

    return Tensor._result(out if keepdims else np.squeeze(out, ax), (a,), backward, "max")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return Tensor._result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data[index]

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._result(np.array(out), (a,), backward, "getitem")


def take(table, indices, axis: int = 0) -> Tensor:
    """Gather rows of ``table`` (embedding lookup)."""
    table = as_tensor(table)
    idx = np.asarray(indices)
    shape = table.shape
    out = np.take(table.data, idx, axis=axis)

    def backward(g):
        full = np.zeros(shape)
        if axis == 0:
            np.add.at(full, idx, g)
        else:
            moved = np.moveaxis(full, axis, 0)
            np.add.at(moved, idx, np.moveaxis(g, list(range(axis, axis + idx.ndim)), list(range(idx.ndim))))
        return (full,)

    return Tensor._result(out, (table,), backward, "take")


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis % ts[0].ndim
    sizes = [t.shape[ax] for t in ts]
    out = np.concatenate([t.data for t in ts], axis=ax)
    splits = np.cumsum(sizes)[:-1]
    return Tensor._result(out, tuple(ts), lambda g: tuple(np.split(g, splits, axis=ax)), "concat")


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)
    ax = axis % out.ndim
    return Tensor._result(out, tuple(ts), lambda g: tuple(np.moveaxis(g, ax, 0)), "stack")


def where(cond, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    c = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape
    out = np.where(c, a.data, b.data)

    def backward(g):
        return (_unbroadcast(np.where(c, g, 0.0), sa), _unbroadcast(np.where(c, 0.0, g), sb))

    return Tensor._result(out, (a, b), backward, "where")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return Tensor._result(np.broadcast_to(a.data, shape), (a,), lambda g: (_unbroadcast(g, old),), "broadcast_to")


# ---------------------------------------------------------------------------
# contractions
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ContractError(f"matmul: inner extents differ ({a.shape} @ {b.shape})")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ContractError(f"matmul: batch dims {a.shape[:-2]} and {b.shape[:-2]} not broadcastable") from None
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(ad @ bd, (a, b), backward, "matmul")


def _einsum_grad(out_sub: str, other_sub: str | None, target_sub: str, g, other, target_shape):
    present = set(out_sub) | set(other_sub or "")
    kept = "".join(c for c in target_sub if c in present)
    if other_sub is None:
        red = np.einsum(f"{out_sub}->{kept}", g)
    else:
        red = np.einsum(f"{out_sub},{other_sub}->{kept}", g, other, optimize=True)
    if kept != target_sub:
        for i, c in enumerate(target_sub):
            if c not in present:
                red = np.expand_dims(red, i)
        red = np.broadcast_to(red, target_shape)
    return red


def einsum(subscripts: str, *operands) -> Tensor:
    """One- or two-operand einsum without ellipses or repeated indices."""
    ops = [as_tensor(o) for o in operands]
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(ops) or len(ops) not in (1, 2):
        raise ContractError(f"einsum {subscripts!r}: expected 1 or 2 operands")
    for s, o in zip(in_subs, ops):
        if len(s) != o.ndim or len(set(s)) != len(s):
            raise ContractError(f"einsum {subscripts!r}: operand of shape {o.shape} does not match {s!r}")
    out = np.einsum(subscripts, *[o.data for o in ops], optimize=len(ops) == 2)
    out = np.asarray(out, dtype=np.float64)

    if len(ops) == 1:
        (a,) = ops
        sa = in_subs[0]
        return Tensor._result(out, (a,), lambda g: (_einsum_grad(out_sub, None, sa, g, None, a.shape),), "einsum")

    a, b = ops
    sa, sb = in_subs

    def backward(g):
        ga = _einsum_grad(out_sub, sb, sa, g, b.data, a.shape) if a.requires_grad else None
        gb = _einsum_grad(out_sub, sa, sb, g, a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(out, (a, b), backward, "einsum")


# ---------------------------------------------------------------------------
# fused normalisers
# ---------------------------------------------------------------------------

def softmax_lastdim(a, mask=None) -> Tensor:
    """Softmax over the last axis; ``mask`` marks entries that participate."""
    a = as_tensor(a)
    x = a.data
    if mask is not None:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not m.any(axis=-1).all():
            raise ContractError("softmax: a row has every entry masked out")
        shifted = np.where(m, x, -np.inf)
    else:
        m = None
        shifted = x
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    if m is not None:
        e = np.where(m, e, 0.0)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor._result(y, (a,), backward, "softmax")


def layernorm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    if eps <= 0:
        raise ContractError("layernorm eps must be positive")
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ContractError(f"layernorm: gain/bias must have shape ({d},)")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def backward(g):
        gx = None
        if a.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        ggain = (g * xhat).reshape(-1, d).sum(axis=0) if gain.requires_grad else None
        gbias = g.reshape(-1, d).sum(axis=0) if bias.requires_grad else None
        return gx, ggain, gbias

    return Tensor._result(out, (a, gain, bias), backward, "layernorm")


def custom(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
    """Record an op whose forward and backward were computed elsewhere."""
    return Tensor._result(np.asarray(data, dtype=np.float64), tuple(parents), backward, op)
