"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

The graph is rebuilt on every forward pass (define-by-run): each operation
appends one node to a module-level tape while gradients are enabled and at
least one input requires a gradient.  ``backward`` replays the tape in exact
reverse recording order.  Gradients accumulate additively across backward
calls until explicitly zeroed (by the optimizer or ``zero_grad``).

Single-threaded per tape; tensors that never touch the tape are plain
immutable value holders and can be shared freely.
"""

from __future__ import annotations

import ctypes
import math
from contextlib import contextmanager

import numpy as np


def _tune_allocator() -> None:
    """Keep large temporaries on the heap freelist instead of mmap.

    A define-by-run graph pins every intermediate until the tape is cleared,
    which defeats glibc's dynamic mmap threshold: each fresh buffer becomes
    its own mmap/munmap plus page faults, an order of magnitude slower than
    freelist reuse.  Best effort; silently skipped on non-glibc platforms.
    """
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 64 * 1024 * 1024)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 64 * 1024 * 1024)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass


_tune_allocator()

__all__ = [
    "Tensor",
    "GraphError",
    "ShapeError",
    "MaskError",
    "tensor",
    "parameter",
    "no_grad",
    "grad_enabled",
    "clear_graph",
    "graph_size",
    "backward",
    "zero_grad",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "reshape",
    "transpose",
    "transpose_last2",
    "concat",
    "index",
    "sum_",
    "mean_",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "gelu",
    "softmax",
    "log_softmax",
    "layer_norm",
    "embedding",
    "gather_last",
    "minimum",
    "maximum",
    "clip",
]


class GraphError(RuntimeError):
    """Contract violation in graph construction or backward traversal."""


class ShapeError(ValueError):
    """Operand shapes violate an operation's precondition."""


class MaskError(ValueError):
    """A softmax mask leaves no admissible entry in some row."""


class _Node:
    __slots__ = ("out", "inputs", "bwd")

    def __init__(self, out, inputs, bwd):
        self.out = out
        self.inputs = inputs
        self.bwd = bwd


_TAPE: list[_Node] = []
_GRAD_ENABLED: bool = True


class Tensor:
    """A dense float64 array, optionally tracked on the autodiff tape.

    ``node_id`` is the tensor's position in the tape and is ``None`` for
    leaves (parameters and constants).
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # Arithmetic sugar; all route through the module-level ops.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


def tensor(data) -> Tensor:
    """Constant tensor (no gradient tracking)."""
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    """Leaf tensor that collects gradients."""
    return Tensor(data, requires_grad=True)


@contextmanager
def no_grad():
    """Suspend tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def clear_graph() -> None:
    """Drop all recorded nodes. Invalidates node ids of earlier outputs."""
    _TAPE.clear()


def graph_size() -> int:
    return len(_TAPE)


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _record(out_data: np.ndarray, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    out = Tensor(out_data)
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node_id = len(_TAPE)
        _TAPE.append(_Node(out, inputs, bwd))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    ad, bd = a.data, b.data
    out = ad * bd

    def bwd(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record(out, (a, b), bwd)


def neg(a) -> Tensor:
    a = _coerce(a)

    def bwd(g):
        return (-g,)

    return _record(-a.data, (a,), bwd)


# ---------------------------------------------------------------------------
# Linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product of the last two axes; leading axes follow numpy rules."""
    a, b = _coerce(a), _coerce(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul requires >=2-d operands, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {ad.shape} vs {bd.shape}")
    out = ad @ bd
    need_a, need_b = a.requires_grad, b.requires_grad

    def bwd(g):
        ga = g @ bd.swapaxes(-1, -2) if need_a else None
        gb = ad.swapaxes(-1, -2) @ g if need_b else None
        return (
            _unbroadcast(ga, ad.shape) if need_a else None,
            _unbroadcast(gb, bd.shape) if need_b else None,
        )

    return _record(out, (a, b), bwd)


def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    src = a.data.shape

    def bwd(g):
        return (g.reshape(src),)

    return _record(a.data.reshape(shape), (a,), bwd)


def transpose(a, axes) -> Tensor:
    a = _coerce(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (g.transpose(inv),)

    return _record(a.data.transpose(axes), (a,), bwd)


def transpose_last2(a) -> Tensor:
    a = _coerce(a)

    def bwd(g):
        return (g.swapaxes(-1, -2),)

    return _record(a.data.swapaxes(-1, -2), (a,), bwd)


def concat(parts, axis: int = 0) -> Tensor:
    parts = tuple(_coerce(p) for p in parts)
    sizes = [p.data.shape[axis] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        pieces = []
        for i in range(len(parts)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(g[tuple(sl)])
        return tuple(pieces)

    return _record(out, parts, bwd)


def index(a, key) -> Tensor:
    """Basic (slice/integer) indexing with scatter-add backward."""
    a = _coerce(a)
    src_shape = a.data.shape
    out = a.data[key]

    def bwd(g):
        full = np.zeros(src_shape, dtype=np.float64)
        full[key] = g
        return (full,)

    return _record(np.ascontiguousarray(out), (a,), bwd)


# ---------------------------------------------------------------------------
# Reductions


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    src = a.data.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, src).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _record(out, (a,), bwd)


def mean_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    src = a.data.shape
    if axis is None:
        count = a.data.size
    else:
        count = src[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / count, src).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, src).copy(),)

    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# Pointwise nonlinearities


def exp(a) -> Tensor:
    a = _coerce(a)
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return _record(out, (a,), bwd)


def log(a) -> Tensor:
    a = _coerce(a)
    ad = a.data

    def bwd(g):
        return (g / ad,)

    return _record(np.log(ad), (a,), bwd)


def tanh(a) -> Tensor:
    a = _coerce(a)
    out = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return _record(out, (a,), bwd)


def sigmoid(a) -> Tensor:
    a = _coerce(a)
    out = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _record(out, (a,), bwd)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """Tanh-form gaussian error linear unit."""
    a = _coerce(a)
    x = a.data
    x2 = x * x
    inner = x2 * x
    inner *= 0.044715
    inner += x
    inner *= _GELU_C
    t = np.tanh(inner)
    out = 1.0 + t
    out *= x
    out *= 0.5

    def bwd(g):
        dinner = x2 * (3 * 0.044715)
        dinner += 1.0
        dinner *= _GELU_C
        dx = 1.0 - t * t
        dx *= x
        dx *= dinner
        dx += 1.0 + t
        dx *= 0.5
        dx *= g
        return (dx,)

    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# Row-structured operations (last axis)


def softmax(a, mask: np.ndarray | None = None) -> Tensor:
    """Row softmax over the last axis, numerically stabilized.

    ``mask`` is a boolean array broadcastable to ``a``; ``True`` marks entries
    that participate.  Masked-out positions are exactly zero in the result.
    """
    a = _coerce(a)
    x = a.data
    if mask is None:
        m = x.max(axis=-1, keepdims=True)
        e = np.exp(x - m)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=-1).all():
            raise MaskError("softmax mask excludes every entry of some row")
        neg = np.where(mask, x, -np.inf)
        m = neg.max(axis=-1, keepdims=True)
        e = np.where(mask, np.exp(x - m), 0.0)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _record(out, (a,), bwd)


def log_softmax(a) -> Tensor:
    a = _coerce(a)
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def bwd(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _record(out, (a,), bwd)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit population variance, then
    apply a learned affine map.  Zero-variance rows map to the bias vector."""
    a, gain, bias = _coerce(a), _coerce(gain), _coerce(bias)
    x = a.data
    d = x.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm affine parameters must have shape ({d},); "
            f"got {gain.data.shape} and {bias.data.shape}"
        )
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        dgain = _unbroadcast(g * xhat, gain.data.shape)
        dbias = _unbroadcast(g, bias.data.shape)
        dxhat = g * gain.data
        s1 = dxhat.sum(axis=-1, keepdims=True)
        s2 = (dxhat * xhat).sum(axis=-1, keepdims=True)
        dx = inv / d * (d * dxhat - s1 - xhat * s2)
        return dx, dgain, dbias

    return _record(out, (a, gain, bias), bwd)


# ---------------------------------------------------------------------------
# Lookup / selection


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]`` with scatter-add backward into the table."""
    table = _coerce(table)
    ids = np.asarray(ids, dtype=np.int64)
    out = table.data[ids]
    src = table.data.shape

    def bwd(g):
        full = np.zeros(src, dtype=np.float64)
        np.add.at(full, ids, g)
        return (full,)

    return _record(out, (table,), bwd)


def gather_last(a, ids) -> Tensor:
    """Pick one entry along the last axis per leading index: ``a[..., ids]``."""
    a = _coerce(a)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape != a.data.shape[:-1]:
        raise ShapeError(
            f"gather_last ids shape {ids.shape} must match leading shape "
            f"{a.data.shape[:-1]}"
        )
    expanded = np.expand_dims(ids, -1)
    out = np.take_along_axis(a.data, expanded, axis=-1)[..., 0]
    src = a.data.shape

    def bwd(g):
        full = np.zeros(src, dtype=np.float64)
        np.put_along_axis(full, expanded, np.expand_dims(g, -1), axis=-1)
        return (full,)

    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# Piecewise-linear ops (subgradients route to the selected branch)


def minimum(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    take_a = a.data <= b.data
    out = np.where(take_a, a.data, b.data)

    def bwd(g):
        return (
            _unbroadcast(np.where(take_a, g, 0.0), a.data.shape),
            _unbroadcast(np.where(take_a, 0.0, g), b.data.shape),
        )

    return _record(out, (a, b), bwd)


def maximum(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    take_a = a.data >= b.data
    out = np.where(take_a, a.data, b.data)

    def bwd(g):
        return (
            _unbroadcast(np.where(take_a, g, 0.0), a.data.shape),
            _unbroadcast(np.where(take_a, 0.0, g), b.data.shape),
        )

    return _record(out, (a, b), bwd)


def clip(a, lo, hi) -> Tensor:
    """Clamp to constant bounds (scalars or arrays); gradient passes inside."""
    a = _coerce(a)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    out = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)

    def bwd(g):
        return (np.where(inside, g, 0.0),)

    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# Backward pass


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every leaf (parameter) reachable from a scalar loss.

    Intermediate gradients are transient to this call; leaf gradients add onto
    existing buffers, so repeated backward calls accumulate until the buffers
    are zeroed (by ``zero_grad`` or an optimizer step).
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise GraphError("backward requires a scalar Tensor loss")
    if loss.node_id is None:
        raise GraphError("loss was not produced by the current graph")
    flowing: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for i in range(loss.node_id, -1, -1):
        g = flowing.pop(i, None)
        if g is None:
            continue
        node = _TAPE[i]
        for inp, gi in zip(node.inputs, node.bwd(g)):
            if gi is None:
                continue
            nid = inp.node_id
            if nid is not None:
                prev = flowing.get(nid)
                flowing[nid] = gi if prev is None else prev + gi
            elif inp.requires_grad:
                inp.grad = gi if inp.grad is None else inp.grad + gi


def zero_grad(params) -> None:
    for p in params:
        p.grad = None
