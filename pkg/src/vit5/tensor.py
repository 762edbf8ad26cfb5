"""Dense tensors with reverse-mode automatic differentiation.

Storage and kernels are numpy arrays. Every differentiable op builds a node
holding its parents and a closure that maps the output gradient to one
gradient per parent. ``Tensor.backward`` walks the graph in reverse creation
order, so parents are always visited after their children.

Precision is chosen per run, not per tensor: ``f32`` for training and ``f64``
for verification (see :func:`precision`).
"""

from __future__ import annotations

import itertools
import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NumericError",
    "precision",
    "get_dtype",
    "no_grad",
    "tensor",
    "parameter",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "reshape",
    "transpose",
    "concat_tokens",
    "slice_tokens",
    "mean",
    "mean_lastdims",
    "gather_rows",
    "sum",
    "gelu",
    "silu",
    "softmax_lastdim",
    "cross_entropy_with_logits",
    "rms_normalize",
    "layer_normalize",
    "rotate_pairs",
    "DIAGNOSTICS",
]

GELU_C = math.sqrt(2.0 / math.pi)  # 0.7978845608...

_DTYPES = {"f32": np.float32, "f64": np.float64}
_mode = "f32"
_grad_enabled = True
_ids = itertools.count()

# Raised flags from verification-mode runs (e.g. NaN entering softmax).
DIAGNOSTICS: list[str] = []


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""

    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes " + " and ".join(str(tuple(s)) for s in shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NumericError(FloatingPointError):
    """A non-finite value appeared where the model requires finite ones."""

    def __init__(self, what: str, layer: int | None = None, step: int | None = None):
        self.what = what
        self.layer = layer
        self.step = step
        where = []
        if layer is not None:
            where.append(f"layer {layer}")
        if step is not None:
            where.append(f"step {step}")
        suffix = f" at {', '.join(where)}" if where else ""
        super().__init__(f"non-finite {what}{suffix}")


@contextmanager
def precision(mode: str):
    """Run the enclosed block in ``"f32"`` or ``"f64"`` mode."""
    global _mode
    if mode not in _DTYPES:
        raise ValueError(f"unknown precision {mode!r}; expected one of {sorted(_DTYPES)}")
    prev, _mode = _mode, mode
    try:
        yield
    finally:
        _mode = prev


def get_precision() -> str:
    return _mode


def get_dtype() -> type:
    return _DTYPES[_mode]


@contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Callable | None = None, op: str = "leaf"):
        arr = np.asarray(data)
        if arr.dtype != get_dtype():
            arr = arr.astype(get_dtype())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = _parents
        self._backward = _backward
        self._id = next(_ids)

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        rg = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{rg})"

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring grad."""
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward", self.shape, detail="implicit gradient needs a scalar")
            grad = np.ones_like(self.data)
        nodes = _collect(self)
        grads: dict[int, np.ndarray] = {self._id: np.asarray(grad, dtype=self.data.dtype)}
        for node in nodes:
            g = grads.pop(node._id, None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(parent._id)
                grads[parent._id] = pg if prev is None else prev + pg


def _collect(root: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t._id in seen:
            continue
        seen[t._id] = t
        stack.extend(p for p in t._parents if p.requires_grad)
    # parents are created strictly before children, so descending id is a topological order
    return sorted(seen.values(), key=lambda t: t._id, reverse=True)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=get_dtype()), requires_grad=True)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    rg = _grad_enabled and any(p.requires_grad for p in parents)
    if rg:
        return Tensor(data, True, tuple(parents), backward, op)
    return Tensor(data, op=op)


# ---------------------------------------------------------------- broadcasting

def _broadcast_shape(op: str, a: tuple, b: tuple) -> tuple:
    """One-sided broadcasting: the result must take the shape of one operand."""
    if a == b:
        return a
    try:
        out = np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(op, a, b) from None
    if out != a and out != b:
        raise ShapeError(op, a, b, detail="result shape must equal one operand's shape")
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a.shape, b.shape)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("sub", a.shape, b.shape)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("mul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)), "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)
    return _node(x.data * c, (x,), lambda g: (g * c,), "scale")


def neg(x: Tensor) -> Tensor:
    return _node(-x.data, (x,), lambda g: (-g,), "neg")


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GeLU."""
    xd = x.data
    c = xd.dtype.type(GELU_C)
    k = xd.dtype.type(0.044715)
    half = xd.dtype.type(0.5)
    t = np.tanh(c * (xd + k * (xd * xd * xd)))
    out = half * xd * (1 + t)

    def backward(g):
        dt = (1 - t * t) * c * (1 + 3 * k * xd * xd)
        return (g * (half * (1 + t) + half * xd * dt),)

    return _node(out, (x,), backward, "gelu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1 / (1 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1 + ex)
    return out


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = _sigmoid(xd)
    return _node(xd * s, (x,), lambda g: (g * (s * (1 + xd * (1 - s))),), "silu")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched ``a @ b`` with broadcastable leading dims."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape, detail="expected [..,m,k] @ [..,k,n]")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape, detail="batch extents not broadcastable") from None
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # weight-style right operand: one flat GEMM instead of a batched loop
        k, n = bd.shape
        a2 = ad.reshape(-1, k)
        out = (a2 @ bd).reshape(ad.shape[:-1] + (n,))

        def backward(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _node(out, (a, b), backward, "matmul")

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))

    return _node(ad @ bd, (a, b), backward, "matmul")


# ---------------------------------------------------------------- shape ops

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, shape) from None
    src = x.shape
    return _node(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeError("transpose", x.shape, detail=f"bad permutation {axes}")
    inv = tuple(np.argsort([a % x.ndim for a in axes]))
    # materialized so downstream matmuls see contiguous row-major buffers
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return _node(out, (x,), lambda g: (np.transpose(g, inv),), "transpose")


def concat_tokens(parts: Sequence[Tensor], axis: int = -2) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_tokens", detail="no operands")
    ref = parts[0].shape
    ax = axis % len(ref)
    for p in parts[1:]:
        if p.ndim != len(ref) or any(p.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError("concat_tokens", ref, p.shape, detail=f"must agree off axis {axis}")
    sizes = [p.shape[ax] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return _node(np.concatenate([p.data for p in parts], axis=ax), parts, backward, "concat_tokens")


def slice_tokens(x: Tensor, start: int, stop: int, axis: int = -2) -> Tensor:
    ax = axis % x.ndim
    n = x.shape[ax]
    if not (0 <= start <= stop <= n):
        raise ShapeError("slice_tokens", x.shape, detail=f"range [{start},{stop}) outside extent {n}")
    idx = [slice(None)] * x.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    src, dtype = x.shape, x.data.dtype

    def backward(g):
        full = np.zeros(src, dtype=dtype)
        full[idx] = g
        return (full,)

    return _node(x.data[idx], (x,), backward, "slice_tokens")


def gather_rows(x: Tensor, index) -> Tensor:
    """Rows ``x[index]`` along the first axis."""
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < -x.shape[0] or index.max() >= x.shape[0]):
        raise ShapeError("gather_rows", x.shape, detail=f"index out of range for {x.shape[0]} rows")
    src, dtype = x.shape, x.data.dtype

    def backward(g):
        full = np.zeros(src, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _node(x.data[index], (x,), backward, "gather_rows")


# ---------------------------------------------------------------- reductions

def sum(x: Tensor, axis: int | tuple | None = None) -> Tensor:  # noqa: A001
    src = x.shape
    out = x.data.sum(axis=axis)
    axes = None if axis is None else tuple(a % x.ndim for a in np.atleast_1d(axis))

    def backward(g):
        if axes is not None:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, src).copy(),)

    return _node(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis: int | tuple) -> Tensor:
    axes = tuple(sorted(a % x.ndim for a in np.atleast_1d(axis)))
    n = int(np.prod([x.shape[a] for a in axes]))
    src = x.shape
    inv = x.data.dtype.type(1.0 / n)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes) * inv, src).copy(),)

    return _node(x.data.mean(axis=axes), (x,), backward, "mean")


def mean_lastdims(x: Tensor, n: int = 1) -> Tensor:
    if not 1 <= n <= x.ndim:
        raise ShapeError("mean_lastdims", x.shape, detail=f"cannot average last {n} dims")
    return mean(x, tuple(range(x.ndim - n, x.ndim)))


# ---------------------------------------------------------------- softmax & losses

def softmax_lastdim(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError("softmax_lastdim", x.shape)
    xd = x.data
    if _mode == "f64" and np.isnan(xd).any():
        DIAGNOSTICS.append("softmax_lastdim: NaN input")
    e = np.exp(xd - xd.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _node(y, (x,), backward, "softmax_lastdim")


def cross_entropy_with_logits(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under ``logits[B, C]``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy_with_logits", logits.shape, labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ShapeError("cross_entropy_with_logits", logits.shape,
                         detail="label outside [0, num_classes)")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    b = z.shape[0]
    rows = np.arange(b)
    loss = -logp[rows, labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1
        return (p * (g / b),)

    return _node(np.asarray(loss, dtype=z.dtype), (logits,), backward, "cross_entropy_with_logits")


# ---------------------------------------------------------------- normalization kernels

def rms_normalize(x: Tensor, eps: float) -> Tensor:
    """``x / sqrt(mean(x**2) + eps)`` over the last axis (no gain)."""
    xd = x.data
    eps = xd.dtype.type(eps)
    r = 1 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    y = xd * r

    def backward(g):
        return (r * (g - y * (g * y).mean(axis=-1, keepdims=True)),)

    return _node(y, (x,), backward, "rms_normalize")


def layer_normalize(x: Tensor, eps: float) -> Tensor:
    """Zero-mean, unit-variance over the last axis (no affine)."""
    xd = x.data
    eps = xd.dtype.type(eps)
    xc = xd - xd.mean(axis=-1, keepdims=True)
    r = 1 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc * r

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        return (r * (g - gm - y * (g * y).mean(axis=-1, keepdims=True)),)

    return _node(y, (x,), backward, "layer_normalize")


# ---------------------------------------------------------------- rotations

def rotate_pairs(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate channel pairs ``(2i, 2i+1)`` of ``x`` by angles with the given cos/sin.

    ``cos`` and ``sin`` broadcast against ``x.shape[:-1] + (x.shape[-1] // 2,)``.
    """
    if x.shape[-1] % 2:
        raise ShapeError("rotate_pairs", x.shape, detail="last extent must be even")
    dtype = x.data.dtype
    c = np.asarray(cos, dtype=dtype)
    s = np.asarray(sin, dtype=dtype)
    half = x.shape[:-1] + (x.shape[-1] // 2,)
    try:
        np.broadcast_shapes(half, c.shape)
    except ValueError:
        raise ShapeError("rotate_pairs", x.shape, c.shape) from None
    xd = x.data
    xe, xo = xd[..., 0::2], xd[..., 1::2]
    out = np.empty_like(xd)
    out[..., 0::2] = xe * c - xo * s
    out[..., 1::2] = xe * s + xo * c

    def backward(g):
        ge, go = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * c + go * s
        gx[..., 1::2] = go * c - ge * s
        return (gx,)

    return _node(out, (x,), backward, "rotate_pairs")


def op_chain(t: Tensor) -> list[str]:
    """Op names along the graph feeding ``t``, in creation order."""
    return [n.op for n in reversed(_collect(t))] if t.requires_grad else [t.op]


def iter_leaves(t: Tensor) -> Iterable[Tensor]:
    return (n for n in _collect(t) if n._backward is None)
