"""Minimal dense tensor with reverse-mode differentiation.

Everything is float64. A :class:`Tensor` owns a numpy array and, when it was
produced by a differentiable op with at least one grad-requiring input, a
reference to its parents plus a closure that maps the output gradient to the
parents' gradients. :meth:`Tensor.backward` walks that graph once in reverse
topological order and accumulates into the ``grad`` buffers of leaves.

Convolutions run over kernel offsets with one ``tensordot`` per offset, which
keeps the peak memory at one output-sized buffer. The batch axis is optional:
a conv over ``dims`` spatial axes accepts rank ``dims + 1`` (channels first) or
``dims + 2`` (batch, channels, ...).
"""

from __future__ import annotations

import contextlib
import itertools
import os
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError

DEBUG = bool(os.environ.get("GARNET_DEBUG"))

_grad_enabled = True
_mac_log: list[list] = []


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (inference, finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def count_macs():
    """Record ``(op, macs)`` for every conv/linear executed inside the block."""
    log: list = []
    _mac_log.append(log)
    try:
        yield log
    finally:
        _mac_log.remove(log)


_pattern_log: list[list] = []


@contextlib.contextmanager
def activation_patterns():
    """Record the branch mask of every piecewise op (relu, clamp, max, ...) run inside the block.

    Two evaluations with equal patterns lie on the same smooth piece, which
    is what a finite-difference probe needs.
    """
    log: list = []
    _pattern_log.append(log)
    try:
        yield log
    finally:
        _pattern_log.remove(log)


def _record_pattern(mask: np.ndarray) -> None:
    for log in _pattern_log:
        log.append(np.packbits(mask))


def _record_macs(op: str, macs: int) -> None:
    for log in _mac_log:
        log.append((op, int(macs)))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

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
            raise ContractError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def backward(self) -> None:
        if self.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
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
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # arithmetic sugar
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _topo_order(root: Tensor) -> list[Tensor]:
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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if DEBUG and not np.all(np.isfinite(out.data)):
        if all(np.all(np.isfinite(p.data)) for p in parents):
            raise FloatingPointError(f"{op} produced non-finite values from finite inputs")
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make(out, (a, b), backward, "div")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def absolute(x: Tensor) -> Tensor:
    _record_pattern(x.data > 0)
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to ``[lo, hi]``; gradient passes only where the input was inside."""
    inside = (x.data >= lo) & (x.data <= hi)
    _record_pattern(inside)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clamp")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _record_pattern(mask)
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    pos = x.data > 0
    _record_pattern(pos)
    scale = np.where(pos, 1.0, slope)
    return _make(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def sigmoid(x: Tensor) -> Tensor:
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, 0.2)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ContractError(f"unknown activation {kind!r}")


def norm(x: Tensor, axis=-1) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at a zero vector is taken as 0."""
    out = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    _record_pattern(out > 0)
    safe = np.where(out > 0, out, 1.0)

    def backward(g):
        return (np.expand_dims(g, axis) * x.data / safe * (out > 0),)

    return _make(np.squeeze(out, axis=axis), (x,), backward, "norm")


# ---------------------------------------------------------------- reductions


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.sum(x.data, axis=axes, keepdims=keepdims), (x,), backward, "sum")


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _make(np.mean(x.data, axis=axes, keepdims=keepdims), (x,), backward, "mean")


def reduce_max(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction. Tied maxima share the incoming gradient equally."""
    axes = _norm_axes(axis, x.ndim)
    m = np.max(x.data, axis=axes, keepdims=True)
    mask = x.data == m
    _record_pattern(mask)
    share = mask / mask.sum(axis=axes, keepdims=True)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (g * share,)

    out = m if keepdims else np.squeeze(m, axis=axes)
    return _make(out, (x,), backward, "max")


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def broadcast_to(x: Tensor, shape) -> Tensor:
    return _make(
        np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (_unbroadcast(g, x.shape),), "broadcast"
    )


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def index(x: Tensor, idx) -> Tensor:
    basic = _is_basic_index(idx)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(x.data[idx]), (x,), backward, "index")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not xs:
        raise ContractError("concat of an empty list")
    xs = [as_tensor(t) for t in xs]
    axis = axis % xs[0].ndim
    bounds = np.cumsum([0] + [t.shape[axis] for t in xs])

    def backward(g):
        return tuple(
            g[(slice(None),) * axis + (slice(bounds[i], bounds[i + 1]),)] for i in range(len(xs))
        )

    return _make(np.concatenate([t.data for t in xs], axis=axis), xs, backward, "concat")


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not xs:
        raise ContractError("stack of an empty list")
    xs = [as_tensor(t) for t in xs]
    shape = xs[0].shape
    for i, t in enumerate(xs):
        if t.shape != shape:
            raise ContractError(f"stack: element {i} has shape {t.shape}, expected {shape}")

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))

    return _make(np.stack([t.data for t in xs], axis=axis), xs, backward, "stack")


def unstack(x: Tensor, axis: int = 0) -> list[Tensor]:
    return [index(x, (slice(None),) * axis + (i,)) for i in range(x.shape[axis])]


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` with ``w`` shaped (out, in)."""
    if x.shape[-1] != w.shape[1]:
        raise ContractError(f"linear: input last axis is {x.shape[-1]}, weight expects {w.shape[1]}")
    rows = int(np.prod(x.shape[:-1])) if x.ndim > 1 else 1
    _record_macs("linear", rows * w.shape[0] * w.shape[1])
    y = matmul(x, transpose(w))
    return y if b is None else add(y, b)


# ---------------------------------------------------------------- softmax


def softmax(x: Tensor, axis: int = 0) -> Tensor:
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make(out, (x,), backward, "softmax")


def softmax_over_branches(logits: Sequence[Tensor]) -> list[Tensor]:
    """Normalize a list of same-shaped logit tensors across the list, per cell."""
    if len(logits) == 0:
        raise ContractError("softmax_over_branches needs at least one branch")
    return unstack(softmax(stack(logits, 0), 0), 0)


# ---------------------------------------------------------------- pooling


def pool(x: Tensor, kind: str, scope: str, batched: bool = False) -> Tensor:
    """Global pooling.

    ``scope="global-spatial"`` reduces every spatial axis and leaves one value
    per channel; ``scope="channel-wise-spatial"`` reduces the channel axis and
    leaves a single-channel spatial map.
    """
    ch = 1 if batched else 0
    if x.ndim < ch + 2:
        raise ContractError(f"pool needs a channel axis and at least one spatial axis, got {x.shape}")
    if any(n == 0 for n in x.shape[ch + 1 :]):
        raise ContractError(f"pool over an empty spatial extent {x.shape}")
    if scope == "global-spatial":
        axes, keep = tuple(range(ch + 1, x.ndim)), False
    elif scope == "channel-wise-spatial":
        axes, keep = (ch,), True
    else:
        raise ContractError(f"unknown pool scope {scope!r}")
    if kind == "max":
        return reduce_max(x, axes, keep)
    if kind == "avg":
        return reduce_mean(x, axes, keep)
    raise ContractError(f"unknown pool kind {kind!r}")


def avg_pool(x: Tensor, size: int, dims: int) -> Tensor:
    """Non-overlapping average pooling with window ``size`` on every spatial axis."""
    lead = x.shape[: x.ndim - dims]
    spatial = x.shape[x.ndim - dims :]
    for ax, n in enumerate(spatial):
        if n % size:
            raise ContractError(f"avg_pool: spatial axis {ax} extent {n} not divisible by {size}")
    split = lead + tuple(v for n in spatial for v in (n // size, size))
    inner = tuple(len(lead) + 2 * i + 1 for i in range(dims))
    return reduce_mean(reshape(x, split), inner)


# ---------------------------------------------------------------- convolution


def _window(offset, out_sp, stride):
    return (slice(None), slice(None)) + tuple(
        slice(o, o + stride * (n - 1) + 1, stride) for o, n in zip(offset, out_sp)
    )


def _corr(xp: np.ndarray, w: np.ndarray, stride: int, out_sp) -> np.ndarray:
    """Cross-correlate padded ``xp`` (N, B, *S) with ``w`` (A, B, *k) -> (N, A, *out)."""
    acc = np.zeros((w.shape[0], xp.shape[0]) + tuple(out_sp))
    for off in itertools.product(*(range(k) for k in w.shape[2:])):
        acc += np.tensordot(w[(slice(None), slice(None)) + off], xp[_window(off, out_sp, stride)], axes=(1, 1))
    return np.ascontiguousarray(np.moveaxis(acc, 0, 1))


def _corr_adjoint(g: np.ndarray, w: np.ndarray, stride: int, full_sp) -> np.ndarray:
    """Adjoint of :func:`_corr`: spread ``g`` (N, A, *out) back to (N, B, *full)."""
    out_sp = g.shape[2:]
    buf = np.zeros((w.shape[1], g.shape[0]) + tuple(full_sp))
    for off in itertools.product(*(range(k) for k in w.shape[2:])):
        buf[_window(off, out_sp, stride)] += np.tensordot(w[(slice(None), slice(None)) + off], g, axes=(0, 1))
    return np.ascontiguousarray(np.moveaxis(buf, 0, 1))


def _corr_wgrad(xp: np.ndarray, g: np.ndarray, stride: int, kshape) -> np.ndarray:
    """Gradient of :func:`_corr` w.r.t. its weight: (A, B, *k)."""
    out_sp = g.shape[2:]
    red = [0] + list(range(2, g.ndim))
    gw = np.empty((g.shape[1], xp.shape[1]) + tuple(kshape))
    for off in itertools.product(*(range(k) for k in kshape)):
        gw[(slice(None), slice(None)) + off] = np.tensordot(g, xp[_window(off, out_sp, stride)], axes=(red, red))
    return gw


def conv(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    dims: int | None = None,
    stride: int = 1,
    pad: int = 0,
    transposed: bool = False,
) -> Tensor:
    """1/2/3-D convolution or transposed convolution, channels first.

    Weights are (out, in, *k) for a regular conv and (in, out, *k) for a
    transposed one. Output extents follow ``(n + 2*pad - k)//stride + 1`` and
    ``(n - 1)*stride - 2*pad + k`` respectively.
    """
    if dims is None:
        dims = w.ndim - 2
    if dims not in (1, 2, 3) or w.ndim != dims + 2:
        raise ContractError(f"conv: weight rank {w.ndim} does not fit dims={dims}")
    if stride < 1 or pad < 0:
        raise ContractError(f"conv: need stride >= 1 and pad >= 0, got stride={stride}, pad={pad}")
    if x.ndim not in (dims + 1, dims + 2):
        raise ContractError(f"conv: input rank {x.ndim}, expected {dims + 1} or {dims + 2}")
    batched = x.ndim == dims + 2
    xd = x.data if batched else x.data[None]
    kshape = w.shape[2:]
    c_in = w.shape[0] if transposed else w.shape[1]
    c_out = w.shape[1] if transposed else w.shape[0]
    if xd.shape[1] != c_in:
        raise ContractError(f"conv: input channel axis has {xd.shape[1]}, weight expects {c_in}")
    if b is not None and b.shape != (c_out,):
        raise ContractError(f"conv: bias axis 0 has {b.shape}, expected ({c_out},)")
    sp = xd.shape[2:]
    lo = pad
    if not transposed:
        padded = tuple(n + 2 * pad for n in sp)
        out_sp = tuple((n - k) // stride + 1 for n, k in zip(padded, kshape))
        for ax, (n, k) in enumerate(zip(padded, kshape)):
            if n < k:
                raise ContractError(f"conv: spatial axis {ax} (padded extent {n}) smaller than kernel {k}")
        xp = np.pad(xd, [(0, 0), (0, 0)] + [(pad, pad)] * dims) if pad else xd
        y = _corr(xp, w.data, stride, out_sp)
    else:
        full = tuple((n - 1) * stride + k for n, k in zip(sp, kshape))
        out_sp = tuple(n - 2 * pad for n in full)
        for ax, n in enumerate(out_sp):
            if n < 1:
                raise ContractError(f"conv: transposed output axis {ax} would have extent {n}")
        y = _corr_adjoint(xd, w.data, stride, full)
        if pad:
            y = np.ascontiguousarray(y[(slice(None), slice(None)) + tuple(slice(lo, lo + n) for n in out_sp)])
    if b is not None:
        y += b.data.reshape((1, -1) + (1,) * dims)
    _record_macs(
        "conv_transposed" if transposed else "conv",
        xd.shape[0] * c_out * c_in * int(np.prod(kshape)) * int(np.prod(out_sp)),
    )

    def backward(g):
        g = g if batched else g[None]
        if not transposed:
            gxp = _corr_adjoint(g, w.data, stride, xp.shape[2:])
            gx = gxp[(slice(None), slice(None)) + tuple(slice(lo, lo + n) for n in sp)] if pad else gxp
            gw = _corr_wgrad(xp, g, stride, kshape) if w.requires_grad else None
        else:
            gp = np.pad(g, [(0, 0), (0, 0)] + [(pad, pad)] * dims) if pad else g
            gx = _corr(gp, w.data, stride, sp) if x.requires_grad else None
            gw = _corr_wgrad(gp, xd, stride, kshape) if w.requires_grad else None
        if gx is not None and not batched:
            gx = gx[0]
        gb = g.sum(axis=(0,) + tuple(range(2, g.ndim))) if b is not None and b.requires_grad else None
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _make(y if batched else y[0], parents, backward, "conv")


# ---------------------------------------------------------------- gradient checking


def numeric_grad(f: Callable[[Tensor], Tensor], x: np.ndarray, coords: Iterable[tuple], eps: float) -> dict:
    out = {}
    base = np.array(x, dtype=np.float64)
    with no_grad():
        for c in coords:
            old = base[c]
            base[c] = old + eps
            up = f(Tensor(base)).item()
            base[c] = old - eps
            down = f(Tensor(base)).item()
            base[c] = old
            out[c] = (up - down) / (2 * eps)
    return out


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5, coords=None) -> float:
    """Max over coordinates of ``|analytic - numeric| / max(1, |numeric|)``.

    ``coords`` restricts the check to a subset of multi-indices (all by default).
    """
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    f(xt).backward()
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x0)
    if coords is None:
        coords = list(np.ndindex(*x0.shape))
    numeric = numeric_grad(f, x0, coords, eps)
    worst = 0.0
    for c, n in numeric.items():
        worst = max(worst, abs(analytic[c] - n) / max(1.0, abs(n)))
    return worst
