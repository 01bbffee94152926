"""Reverse-mode automatic differentiation over dense float64 arrays.

Every primitive builds its output eagerly and, when any input tracks
gradients, records a closure mapping the output gradient to input
gradients. :func:`backward` linearises the recorded graph into a
:class:`Tape` and replays it once.

Broadcasting is deliberately narrow: binary elementwise ops accept
identical shapes, or a 0-d scalar against any shape. Row-wise bias and
per-row scaling have their own named primitives (:func:`add_bias`,
:func:`scale_rows`) so a shape slip surfaces as an error.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "NonFiniteError", "ShapeError",
    "tensor", "as_tensor", "no_grad", "is_grad_enabled",
    "add", "sub", "mul", "scale", "matmul", "add_bias", "scale_rows",
    "sigmoid", "tanh", "exp", "square", "relu", "silu", "sin", "cos",
    "sum", "mean", "concat", "reshape", "transpose", "floor",
    "stop_gradient", "unfold2d", "backward",
]


class ShapeError(ValueError):
    """Operand shapes do not conform to a primitive's broadcasting rule."""


class NonFiniteError(ValueError):
    """A value that must be finite contains NaN or inf."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Evaluate primitives without recording anything on the tape."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, *, _check: bool = True):
        arr = np.asarray(data, dtype=np.float64)
        if _check and not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite value in tensor of shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"
        self._consumed = False

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
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
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
        if isinstance(other, (int, float, np.floating, np.integer)):
            return scale(self, 1.0 / float(other))
        raise TypeError("tensor division is only defined by a Python scalar")

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    tracked = tuple(parents)
    if _GRAD_ENABLED and any(p.requires_grad for p in tracked):
        out.requires_grad = True
        out._parents = tracked
        out._backward = backward_fn
        out._op = op
    return out


def _check_same_or_scalar(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform "
                     "(only identical shapes or a 0-d scalar are allowed)")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    # scalar operand broadcast against a full tensor
    return np.asarray(g.sum()).reshape(shape)


# --------------------------------------------------------------------------
# elementwise binary

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_or_scalar(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_or_scalar(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float, np.floating, np.integer)):
        return scale(as_tensor(a), float(b))
    if isinstance(a, (int, float, np.floating, np.integer)):
        return scale(as_tensor(b), float(a))
    a, b = as_tensor(a), as_tensor(b)
    _check_same_or_scalar(a, b, "mul")
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape
    return _make(ad * bd, (a, b),
                 lambda g: (_reduce_to(g * bd, sa), _reduce_to(g * ad, sb)), "mul")


def scale(x: Tensor, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    if not np.isfinite(c):
        raise NonFiniteError("scale factor must be finite")
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x + b`` with ``b`` of shape ``(H,)`` added to every row of ``x`` ``(B, H)``."""
    x, b = as_tensor(x), as_tensor(b)
    if x.ndim != 2 or b.shape != (x.shape[1],):
        raise ShapeError(f"add_bias: shapes {x.shape} and {b.shape} do not conform")
    return _make(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)), "add_bias")


def scale_rows(x: Tensor, s) -> Tensor:
    """Multiply row ``i`` of ``x`` by the constant ``s[i]``; ``s`` carries no gradient."""
    x = as_tensor(x)
    s = np.asarray(s.data if isinstance(s, Tensor) else s, dtype=np.float64).reshape(-1)
    if s.shape[0] != x.shape[0]:
        raise ShapeError(f"scale_rows: {s.shape[0]} factors for {x.shape[0]} rows")
    sb = s.reshape((-1,) + (1,) * (x.ndim - 1))
    return _make(x.data * sb, (x,), lambda g: (g * sb,), "scale_rows")


# --------------------------------------------------------------------------
# elementwise unary

def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    xd = x.data
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def square(x: Tensor) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def silu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    s = 0.5 + 0.5 * np.tanh(0.5 * xd)
    return _make(xd * s, (x,), lambda g: (g * (s + xd * s * (1.0 - s)),), "silu")


def sin(x: Tensor) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _make(np.sin(xd), (x,), lambda g: (g * np.cos(xd),), "sin")


def cos(x: Tensor) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _make(np.cos(xd), (x,), lambda g: (-g * np.sin(xd),), "cos")


def floor(x: Tensor) -> Tensor:
    """Elementwise floor. Not differentiable: the result never tracks gradients."""
    x = as_tensor(x)
    return Tensor(np.floor(x.data))


def stop_gradient(x: Tensor) -> Tensor:
    """Identity on values; cuts the graph so no gradient flows back into ``x``."""
    x = as_tensor(x)
    out = Tensor(x.data, _check=False)
    return out


# --------------------------------------------------------------------------
# reductions and structure

def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    shape = x.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis)), (x,), bw, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    n = x.size if axis is None else int(np.prod([shape[a] for a in np.atleast_1d(axis)]))

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g / n, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g / n, axis), shape).copy(),)

    return _make(np.asarray(x.data.mean(axis=axis)), (x,), bw, "mean")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ref = xs[0].shape
    ax = axis % len(ref)
    for x in xs[1:]:
        if len(x.shape) != len(ref) or any(
                s != r for i, (s, r) in enumerate(zip(x.shape, ref)) if i != ax):
            raise ShapeError(f"concat: shapes {ref} and {x.shape} do not conform on axis {axis}")
    splits = np.cumsum([x.shape[ax] for x in xs])[:-1]
    return _make(np.concatenate([x.data for x in xs], axis=ax), xs,
                 lambda g: tuple(np.split(g, splits, axis=ax)), "concat")


def _getitem(x: Tensor, idx) -> Tensor:
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(x.data[idx]), (x,), bw, "slice")


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    x = as_tensor(x)
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,),
                 lambda g: (np.transpose(g, inv),), "transpose")


def unfold2d(x: Tensor, k: int, stride: int = 1, pad: int = 0) -> Tensor:
    """im2col: ``(B, C, H, W)`` -> ``(B * OH * OW, C * k * k)`` patch matrix."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"unfold2d expects (B, C, H, W), got {x.shape}")
    b, c, h, w = x.shape
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"unfold2d: kernel {k} does not fit input {x.shape}")
    ii = (np.arange(oh) * stride)[:, None] + np.arange(k)[None, :]  # (oh, k)
    jj = (np.arange(ow) * stride)[:, None] + np.arange(k)[None, :]  # (ow, k)
    rows = ii[:, None, :, None]  # oh, 1, k, 1
    cols = jj[None, :, None, :]  # 1, ow, 1, k
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    patches = xp[:, :, rows, cols]  # b, c, oh, ow, k, k
    out = patches.transpose(0, 2, 3, 1, 4, 5).reshape(b * oh * ow, c * k * k)

    def bw(g):
        gp = g.reshape(b, oh, ow, c, k, k).transpose(0, 3, 1, 2, 4, 5)
        full = np.zeros_like(xp)
        np.add.at(full, (slice(None), slice(None), rows, cols), gp)
        return (full[:, :, pad:pad + h, pad:pad + w],)

    return _make(out, (x,), bw, "unfold2d")


# --------------------------------------------------------------------------
# backward pass

class Tape:
    """Topologically ordered record of the graph feeding a scalar loss."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
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
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def replay(self, root: Tensor) -> None:
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        for node in self.nodes:
            if not node.is_leaf:
                node._parents = ()
                node._backward = None
                node._consumed = True
                node.requires_grad = False


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every tracked leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("graph already consumed: backward runs once per forward")
    if not loss.requires_grad:
        return
    if loss.is_leaf:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    Tape.from_root(loss).replay(loss)
