"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Every differentiable operation returns a :class:`Tensor` that remembers its
parents and a backward rule mapping the upstream gradient to one gradient per
parent. :func:`backward` walks the graph in reverse topological order.

Only leaf tensors created with ``requires_grad=True`` accumulate into
``.grad``; calling :func:`backward` twice without zeroing therefore sums the
two passes, matching the usual accumulation contract.

Layout convention for image-like tensors is ``(N, C, H, W)``.
"""

from __future__ import annotations

import contextlib
import functools
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from scipy import special

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value)
    if arr.dtype == np.float64 or arr.dtype == np.float32:
        return arr
    return arr.astype(np.float32)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: Tuple["Tensor", ...] = (),
                 _backward: Optional[Callable] = None, op: str = ""):
        self.data = _as_array(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    # Arithmetic sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def _not_scalar(t):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(value, requires_grad: bool = False) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value, requires_grad=requires_grad)


def _make(data, parents: Sequence[Tensor], rule: Callable, op: str) -> Tensor:
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=rule, op=op)


def backward(loss: Tensor) -> None:
    """Propagate d(loss)/d(leaf) into every reachable leaf's ``.grad``."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order = []
    seen = set()
    stack = [(loss, False)]
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

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
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


# ---------------------------------------------------------------- elementwise

def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _pair(a, b):
    if np.isscalar(a) and isinstance(b, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    if np.isscalar(b) and isinstance(a, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    return tensor(a), tensor(b)


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting; scalars are allowed."""
    a = tensor(a)
    if np.isscalar(b):
        c = a.data.dtype.type(b)
        return _make(a.data * c, (a,), lambda g: (g * c,), "mul_scalar")
    b = tensor(b)
    out = a.data * b.data

    def rule(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _make(out, (a, b), rule, "mul")


def mul_scalar(x, c: float) -> Tensor:
    return mul(x, float(c))


def abs(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = tensor(x)
    s = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * s,), "abs")


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = tensor(x)
    scale = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return _make(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def relu(x) -> Tensor:
    return leaky_relu(x, 0.0)


def clamp01(x) -> Tensor:
    """Smooth map of the real line onto (0, 1) (logistic)."""
    x = tensor(x)
    y = special.expit(x.data).astype(x.dtype)
    return _make(y, (x,), lambda g: (g * y * (1 - y),), "clamp01")


def clip(x, lo: float = 0.0, hi: float = 1.0) -> Tensor:
    """Hard clamp; gradient passes only where the input is strictly inside."""
    x = tensor(x)
    inside = ((x.data > lo) & (x.data < hi)).astype(x.dtype)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


# ---------------------------------------------------------------- reductions

def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)

    return _make(out, (x,), rule, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = tensor(x)
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def amin(x, axis: int = -1) -> Tensor:
    """Minimum along ``axis``; the gradient goes to the first minimiser."""
    x = tensor(x)
    idx = np.argmin(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def rule(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _make(out, (x,), rule, "amin")


# ---------------------------------------------------------------- structure

def reshape(x, shape) -> Tensor:
    x = tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def getitem(x, index) -> Tensor:
    x = tensor(x)

    def rule(g):
        gx = np.zeros_like(x.data)
        gx[index] += g
        return (gx,)

    return _make(x.data[index], (x,), rule, "getitem")


def concat(xs: Sequence, axis: int = 1) -> Tensor:
    xs = [tensor(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def rule(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs)))

    return _make(out, xs, rule, "concat")


def take(x, idx: np.ndarray) -> Tensor:
    """Gather pixels by flat row-major index from the last two axes."""
    x = tensor(x)
    lead = x.shape[:-2]
    hw = x.shape[-2] * x.shape[-1]
    flat = x.data.reshape(-1, hw)
    idx = np.asarray(idx, dtype=np.intp)
    out = flat[:, idx].reshape(lead + idx.shape)

    def rule(g):
        gx = np.zeros_like(flat)
        np.add.at(gx, (slice(None), idx), g.reshape(flat.shape[0], -1))
        return (gx.reshape(x.shape),)

    return _make(out, (x,), rule, "take")


def l2_normalize(x, axis: int = 1, eps: float = 1e-6) -> Tensor:
    x = tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True) + eps)
    y = x.data / norm

    def rule(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return _make(y, (x,), rule, "l2_normalize")


# ---------------------------------------------------------------- convolution

def _im2col3(xp: np.ndarray, h: int, w: int) -> np.ndarray:
    # xp: (C, N, H+2, W+2) -> (C*9, N*H*W)
    c, n = xp.shape[:2]
    cols = np.empty((c, 9, n, h, w), dtype=xp.dtype)
    k = 0
    for i in range(3):
        for j in range(3):
            cols[:, k] = xp[:, :, i:i + h, j:j + w]
            k += 1
    return cols.reshape(c * 9, n * h * w)


def _per_sample_matmul(wmat: np.ndarray, cols: np.ndarray, n: int) -> np.ndarray:
    # (O, K) @ (K, N*P) one sample at a time so results do not depend on batch size
    k, total = cols.shape
    blocks = cols.reshape(k, n, total // n)
    out = np.empty((wmat.shape[0], n, total // n), dtype=np.result_type(wmat, cols))
    for i in range(n):
        out[:, i] = wmat @ np.ascontiguousarray(blocks[:, i])
    return out.reshape(wmat.shape[0], total)


def conv2d(x, weight, bias=None) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1 (cross-correlation)."""
    x, weight = tensor(x), tensor(weight)
    n, c, h, w = x.shape
    o = weight.shape[0]
    if weight.shape != (o, c, 3, 3):
        raise ValueError(f"conv2d weight {weight.shape} does not fit input channels {c}")
    xp = np.pad(x.data.transpose(1, 0, 2, 3), ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = _im2col3(xp, h, w)
    wmat = weight.data.reshape(o, c * 9)
    out = _per_sample_matmul(wmat, cols, n)
    parents = [x, weight]
    if bias is not None:
        bias = tensor(bias)
        out += bias.data[:, None]
        parents.append(bias)
    out = out.reshape(o, n, h, w).transpose(1, 0, 2, 3)

    def rule(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(o, n * h * w)
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ gmat).reshape(c, 9, n, h, w)
            gxp = np.zeros((c, n, h + 2, w + 2), dtype=x.dtype)
            k = 0
            for i in range(3):
                for j in range(3):
                    gxp[:, :, i:i + h, j:j + w] += gcols[:, k]
                    k += 1
            gx = gxp[:, :, 1:-1, 1:-1].transpose(1, 0, 2, 3)
        gw = (gmat @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(gmat.sum(axis=1))
        return tuple(grads)

    return _make(np.ascontiguousarray(out), parents, rule, "conv2d")


def conv1x1(x, weight, bias=None) -> Tensor:
    """Pointwise channel mixing; ``weight`` has shape (out, in)."""
    x, weight = tensor(x), tensor(weight)
    n, c, h, w = x.shape
    o = weight.shape[0]
    if weight.shape != (o, c):
        raise ValueError(f"conv1x1 weight {weight.shape} does not fit input channels {c}")
    xm = x.data.transpose(1, 0, 2, 3).reshape(c, n * h * w)
    out = _per_sample_matmul(weight.data, xm, n)
    parents = [x, weight]
    if bias is not None:
        bias = tensor(bias)
        out += bias.data[:, None]
        parents.append(bias)
    out = out.reshape(o, n, h, w).transpose(1, 0, 2, 3)

    def rule(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(o, n * h * w)
        gx = None
        if x.requires_grad:
            gx = (weight.data.T @ gmat).reshape(c, n, h, w).transpose(1, 0, 2, 3)
        gw = gmat @ xm.T if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(gmat.sum(axis=1))
        return tuple(grads)

    return _make(np.ascontiguousarray(out), parents, rule, "conv1x1")


# ---------------------------------------------------------------- resampling

def downsample(x) -> Tensor:
    """2x2 average pooling over the last two axes."""
    x = tensor(x)
    *lead, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"downsample needs even spatial size, got {h}x{w}")
    out = x.data.reshape(*lead, h // 2, 2, w // 2, 2).mean(axis=(-3, -1))

    def rule(g):
        gx = np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) * x.dtype.type(0.25)
        return (gx,)

    return _make(out, (x,), rule, "downsample")


@functools.lru_cache(maxsize=64)
def interp_matrix(n: int, factor: int, dtype: str = "float32") -> np.ndarray:
    """``(factor*n, n)`` bilinear interpolation matrix, half-pixel centres, edges clamped."""
    centres = (np.arange(factor * n) + 0.5) / factor - 0.5
    centres = np.clip(centres, 0.0, n - 1)
    lo = np.floor(centres).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = centres - lo
    m = np.zeros((factor * n, n))
    rows = np.arange(factor * n)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m.astype(dtype)


def _resize(a: np.ndarray, mh: np.ndarray, mw: np.ndarray) -> np.ndarray:
    # rows then columns, each as one large GEMM
    *lead, h, w = a.shape
    y = a.reshape(-1, w) @ mw.T                      # (L*h, W2)
    y = y.reshape(-1, h, mw.shape[0]).transpose(1, 0, 2).reshape(h, -1)
    y = mh @ y                                       # (H2, L*W2)
    y = y.reshape(mh.shape[0], -1, mw.shape[0]).transpose(1, 0, 2)
    return np.ascontiguousarray(y).reshape(*lead, mh.shape[0], mw.shape[0])


def upsample(x, factor: int = 2) -> Tensor:
    """Bilinear upsampling by an integer factor (half-pixel centres, edge clamped)."""
    x = tensor(x)
    h, w = x.shape[-2:]
    dt = x.dtype.name
    mh, mw = interp_matrix(h, factor, dt), interp_matrix(w, factor, dt)
    out = _resize(x.data, mh, mw)
    return _make(out, (x,), lambda g: (_resize(g, mh.T, mw.T),), "upsample")


def warp(x, operator) -> Tensor:
    """Apply a linear resampling operator to the last two axes.

    ``operator`` is anything with ``matrix`` (sparse, target_pixels x
    source_pixels) and ``target_shape`` attributes, e.g.
    :class:`chromaflow.flow.WarpOperator`.
    """
    x = tensor(x)
    lead = x.shape[:-2]
    flat = x.data.reshape(-1, x.shape[-2] * x.shape[-1])
    mat = operator.matrix
    out = (mat @ flat.T).T.astype(x.dtype).reshape(lead + tuple(operator.target_shape))

    def rule(g):
        gf = g.reshape(flat.shape[0], -1)
        return ((mat.T @ gf.T).T.astype(x.dtype).reshape(x.shape),)

    return _make(out, (x,), rule, "warp")
