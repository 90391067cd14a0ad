"""Dense tensors with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor`; when any input requires a gradient the
output remembers its parents and a closure that maps the output gradient to
input gradients. :meth:`Tensor.backward` replays those records in reverse
topological order and then discards them, so a graph can be consumed once.
"""

from __future__ import annotations

import os
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

# Finite-value assertions at op boundaries.
DEBUG = os.environ.get("BLOCKDROP_DEBUG", "") not in ("", "0")

_state = threading.local()


class AutogradError(RuntimeError):
    """Misuse of the gradient machinery (non-scalar loss, reused graph)."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared in a forward or backward value."""


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Run ops without recording them for backward."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def set_debug(flag: bool) -> None:
    global DEBUG
    DEBUG = bool(flag)


def _check(arr: np.ndarray, where: str) -> None:
    if DEBUG and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {where}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE if dtype is None else dtype)
        # ascontiguousarray would promote 0-d arrays to shape (1,)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = ""
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self.dtype)))

    def __rsub__(self, other):
        return add(_wrap(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return tmean(self)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)


class Parameter(Tensor):
    """A named leaf tensor that always requires a gradient."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    _check(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    out._consumed = False
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# elementwise -----------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _wrap(a, getattr(b, "dtype", DEFAULT_DTYPE))
    b = _wrap(b, a.dtype)
    out = a.data + b.data
    sa, sb = a.shape, b.shape
    return _result(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def mul(a, b) -> Tensor:
    a = _wrap(a, getattr(b, "dtype", DEFAULT_DTYPE))
    b = _wrap(b, a.dtype)
    ad, bd = a.data, b.data
    out = ad * bd

    def back(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), back, "mul")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore"):
        out = np.log(ad)
    return _result(out, (a,), lambda g: (g / ad,), "log")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def clamp_min(a: Tensor, lo: float) -> Tensor:
    """``max(a, lo)``; gradient passes only where ``a`` was not clipped."""
    mask = a.data >= lo
    out = np.where(mask, a.data, np.asarray(lo, dtype=a.dtype))
    return _result(out, (a,), lambda g: (g * mask,), "clamp_min")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)
    return _result(out, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


# reductions and reshapes ---------------------------------------------------------


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    out = np.asarray(a.data.sum(), dtype=a.dtype)
    return _result(out, (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def tmean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    out = np.asarray(a.data.mean(), dtype=a.dtype)
    return _result(out, (a,), lambda g: (np.broadcast_to(g / n, shape).copy(),), "mean")


def sum_axis(a: Tensor, axis: int) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis)
    return _result(
        out, (a,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),), "sum_axis"
    )


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    out = a.data.reshape(shape)
    return _result(out, (a,), lambda g: (g.reshape(old),), "reshape")


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows ``a[idx]`` along the batch axis."""
    idx = np.asarray(idx, dtype=np.intp)
    shape = a.shape
    out = a.data[idx]

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _result(out, (a,), back, "take_rows")


def index_add(a: Tensor, idx: np.ndarray, v: Tensor) -> Tensor:
    """Return a copy of ``a`` with ``v`` added into rows ``idx`` (rows must be unique)."""
    idx = np.asarray(idx, dtype=np.intp)
    if v.shape[1:] != a.shape[1:] or v.shape[0] != idx.shape[0]:
        raise DimensionError(f"index_add: {v.shape} into {a.shape} at {idx.shape[0]} rows")
    out = a.data.copy()
    out[idx] += v.data
    return _result(out, (a, v), lambda g: (g, g[idx]), "index_add")


def columns(a: Tensor, cols: np.ndarray) -> Tensor:
    """Select columns ``a[:, cols]`` of a 2-D tensor."""
    cols = np.asarray(cols, dtype=np.intp)
    shape = a.shape
    out = a.data[:, cols]

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, cols] = g
        return (full,)

    return _result(out, (a,), back, "columns")


# dense layers ---------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return _result(ad @ bd, (a, b), back, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` for ``x`` of shape (B, m), ``w`` (m, n), ``b`` (n,)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"linear: input {x.shape} vs weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias {b.shape} vs weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is not None:
        out = out + b.data
        parents: tuple[Tensor, ...] = (x, w, b)
    else:
        parents = (x, w)

    def back(g):
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.T @ g if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return _result(out, parents, back, "linear")


def _conv_out(n: int, k: int, stride: int, pad: int) -> int:
    span = n + 2 * pad - k
    if span < 0:
        raise DimensionError(f"conv2d: kernel {k} exceeds padded extent {n + 2 * pad}")
    return span // stride + 1


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of (B, C, H, W) input with an (O, C, kh, kw) kernel."""
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} vs kernel {kernel.shape}")
    B, C, H, W = x.shape
    O, _, kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError("conv2d: kernel extents must be odd")
    Ho = _conv_out(H, kh, stride, pad)
    Wo = _conv_out(W, kw, stride, pad)
    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    # patch columns laid out (B, C, kh, kw, Ho, Wo) so the product lands in NCHW
    cols = np.empty((B, C, kh, kw, Ho, Wo), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride]
    cols = cols.reshape(B, C * kh * kw, Ho * Wo)
    kmat = kernel.data.reshape(O, C * kh * kw)
    out = np.matmul(kmat, cols).reshape(B, O, Ho, Wo)

    def back(g):
        g3 = g.reshape(B, O, Ho * Wo)
        gk = None
        if kernel.requires_grad:
            gk = np.einsum("bop,bcp->oc", g3, cols, optimize=True).reshape(kernel.shape)
        gx = None
        if x.requires_grad:
            gcols = np.matmul(kmat.T, g3).reshape(B, C, kh, kw, Ho, Wo)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += gcols[
                        :, :, i, j
                    ]
            gx = gxp[:, :, pad : pad + H, pad : pad + W] if pad else gxp
        return gx, gk

    return _result(out, (x, kernel), back, "conv2d")


def channel_affine(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """Per-channel ``x * scale + shift`` on axis 1 of a 2-D or 4-D tensor."""
    C = x.shape[1]
    if scale.shape != (C,) or shift.shape != (C,):
        raise DimensionError(f"channel_affine: {scale.shape} for {C} channels")
    bshape = (1, C) + (1,) * (x.ndim - 2)
    sd = scale.data.reshape(bshape)
    xd = x.data
    out = xd * sd + shift.data.reshape(bshape)
    red = (0,) + tuple(range(2, x.ndim))

    def back(g):
        gx = g * sd if x.requires_grad else None
        gs = (g * xd).sum(axis=red) if scale.requires_grad else None
        gb = g.sum(axis=red) if shift.requires_grad else None
        return gx, gs, gb

    return _result(out, (x, scale, shift), back, "channel_affine")


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects (B, C, H, W), got {x.shape}")
    B, C, H, W = x.shape
    out = x.data.mean(axis=(2, 3))
    scale = 1.0 / (H * W)

    def back(g):
        return (np.broadcast_to((g * scale)[:, :, None, None], x.shape).astype(g.dtype),)

    return _result(out, (x,), back, "global_avg_pool")


def avg_pool(x: Tensor, k: int) -> Tensor:
    """Non-overlapping ``k x k`` average pooling of a (B, C, H, W) tensor."""
    B, C, H, W = x.shape
    if H % k or W % k:
        raise DimensionError(f"avg_pool: {H}x{W} not divisible by {k}")
    y = reshape(x, (B, C, H // k, k, W // k, k))
    return mul(sum_axis(sum_axis(y, 5), 3), 1.0 / (k * k))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


# softmax family ------------------------------------------------------------------


def _log_softmax_np(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    sh = z - m
    return sh - np.log(np.exp(sh).sum(axis=1, keepdims=True))


def softmax(x: Tensor) -> Tensor:
    p = np.exp(_log_softmax_np(x.data))

    def back(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _result(p, (x,), back, "softmax")


def log_softmax(x: Tensor) -> Tensor:
    ls = _log_softmax_np(x.data)
    p = np.exp(ls)

    def back(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _result(ls, (x,), back, "log_softmax")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross entropy: logits {logits.shape}, labels {labels.shape}")
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    ls = _log_softmax_np(logits.data)
    rows = np.arange(n)
    out = np.asarray(-ls[rows, labels].mean(), dtype=logits.dtype)

    def back(g):
        d = np.exp(ls)
        d[rows, labels] -= 1.0
        return (d * (g / n),)

    return _result(out, (logits,), back, "softmax_cross_entropy")


# backward -----------------------------------------------------------------------


def _toposort(root: Tensor) -> list[Tensor]:
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
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    The recorded graph is released afterwards; a second call on the same
    loss raises :class:`AutogradError`.
    """
    if loss._consumed:
        raise AutogradError("backward already ran on this graph; run a new forward pass")
    if loss.data.size != 1:
        raise AutogradError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise AutogradError("loss does not depend on any tensor that requires grad")
    tape = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if node.requires_grad and g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            _check(pg, f"backward of {node._op}")
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    for node in tape:
        node._parents = ()
        node._backward = None
        node._consumed = node._op != ""
    loss._consumed = True


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
