"""Minimal dense tensor with reverse-mode automatic differentiation.

Every value is a float64 numpy array.  Operations record their inputs and a
backward rule on the output tensor; :func:`backward` walks the recorded graph
in reverse topological order and accumulates gradients into leaf tensors.

Broadcasting is deliberately narrow: a rank-1 operand may be added (or
multiplied) along the last axis, and a rank-0 operand may scale anything.
Everything else must match shapes exactly.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

_DEBUG = False
_GRAD_ENABLED = True


def set_debug(flag: bool) -> None:
    """When enabled, every op raises ``FloatingPointError`` on NaN/Inf output."""
    global _DEBUG
    _DEBUG = bool(flag)


def debug_enabled() -> bool:
    return _DEBUG


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.op = "leaf"

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------


def topological_order(root: Tensor) -> list:
    """Nodes reachable from ``root`` that participate in the tape, inputs first."""
    order, seen = [], set()
    stack = [(root, False)]
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


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not on the tape (no input requires grad)")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topological_order(loss)):
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


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> str:
    if a.shape == b.shape:
        return "same"
    if b.ndim == 0:
        return "scalar"
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return "lastaxis"
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_like(g: np.ndarray, mode: str) -> np.ndarray:
    if mode == "same":
        return g
    if mode == "scalar":
        return np.asarray(g.sum())
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < b.ndim:
        a, b = b, a
    mode = _check_broadcast(a, b, "add")

    def _bw(g):
        return g, (_reduce_like(g, mode) if b.requires_grad else None)

    return _make(a.data + b.data, (a, b), _bw, "add")


def sub(a, b) -> Tensor:
    return add(a, mul(_as_tensor(b), -1.0))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        c = float(b)
        a = _as_tensor(a)
        return _make(a.data * c, (a,), lambda g: (g * c,), "mul")
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < b.ndim:
        a, b = b, a
    mode = _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def _bw(g):
        ga = g * bd if a.requires_grad else None
        return ga, (_reduce_like(g * ad, mode) if b.requires_grad else None)

    return _make(ad * bd, (a, b), _bw, "mul")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU: a smooth ramp, used in MLPs and adapters."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * (xd * xd * xd))
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def _bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _make(out, (x,), _bw, "gelu")


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def getitem(x: Tensor, index) -> Tensor:
    src_shape = x.shape

    def _bw(g):
        full = np.zeros(src_shape, dtype=DTYPE)
        np.add.at(full, index, g) if _is_advanced(index) else _assign_add(full, index, g)
        return (full,)

    return _make(np.array(x.data[index]), (x,), _bw, "getitem")


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def _assign_add(full, index, g):
    full[index] += g


def take(x: Tensor, indices: np.ndarray) -> Tensor:
    """Gather from the flattened ``x``; output has the shape of ``indices``."""
    indices = np.asarray(indices, dtype=np.intp)
    flat = x.data.reshape(-1)
    src_shape = x.shape

    def _bw(g):
        out = np.bincount(indices.reshape(-1), weights=g.reshape(-1), minlength=flat.size)
        return (out.reshape(src_shape),)

    return _make(flat[indices], (x,), _bw, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def _bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, _bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]

    def _bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, _bw, "stack")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), _bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), 1.0 / float(n))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` is (..., M, K).  ``b`` is either a shared (K, N) matrix or carries the
    same leading axes as ``a``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or (b.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise ShapeError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def _bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        if not b.requires_grad:
            gb = None
        elif bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, (a, b), _bw, "matmul")


# ---------------------------------------------------------------------------
# normalisation and softmax
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), _bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def _bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), _bw, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs last axis {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gain.data

    def _bw(g):
        gx_hat = g * gd
        gx = rstd * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        if not (gain.requires_grad or bias.requires_grad):
            return gx, None, None
        flat_g = g.reshape(-1, d)
        return gx, (flat_g * xhat.reshape(-1, d)).sum(axis=0), flat_g.sum(axis=0)

    return _make(xhat * gd + bias.data, (x, gain, bias), _bw, "layer_norm")


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    norm = np.maximum(norm, eps)
    out = xd / norm

    def _bw(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return _make(out, (x,), _bw, "l2_normalize")


def pick(x: Tensor, labels) -> Tensor:
    """Select ``x[n, labels[n]]`` from an (n, k) matrix."""
    labels = np.asarray(labels, dtype=np.intp)
    rows = np.arange(x.shape[0])
    return getitem(x, (rows, labels))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy over the rows of ``logits``."""
    labels = np.asarray(labels, dtype=np.intp)
    k = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    return -mean(pick(log_softmax(logits, -1), labels))


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------


def _im2col(x: np.ndarray, u: int, stride: int) -> np.ndarray:
    # (B, C, H, W) -> (B, H', W', C, u, u)
    win = sliding_window_view(x, (u, u), axis=(2, 3))[:, :, ::stride, ::stride]
    return win.transpose(0, 2, 3, 1, 4, 5)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1) -> Tensor:
    """Cross-correlation (no kernel flip), no padding.

    ``x`` is (Cin, H, W) or (B, Cin, H, W); ``kernel`` is (Cout, Cin, u, u).
    Output extent is ``floor((H - u) / stride) + 1``.
    """
    if stride < 1:
        raise ValueError("stride must be positive")
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d: bad ranks {x.shape} / {kernel.shape}")
    B, cin, H, W = xd.shape
    cout, kcin, u, u2 = kernel.shape
    if kcin != cin or u != u2:
        raise ShapeError(f"conv2d: kernel {kernel.shape} does not match input {x.shape}")
    if u > H or u > W:
        raise ShapeError(f"conv2d: kernel {u}x{u} larger than input {H}x{W}")
    Ho, Wo = (H - u) // stride + 1, (W - u) // stride + 1
    cols = _im2col(xd, u, stride).reshape(B * Ho * Wo, cin * u * u)
    kmat = kernel.data.reshape(cout, cin * u * u)
    out = (cols @ kmat.T).reshape(B, Ho, Wo, cout).transpose(0, 3, 1, 2)

    def _bw(g):
        g4 = g[None] if squeeze else g
        gmat = g4.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, cout)
        gk = (gmat.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        if not x.requires_grad:
            return None, gk
        gcols = (gmat @ kmat).reshape(B, Ho, Wo, cin, u, u)
        gx = np.zeros_like(xd)
        for di in range(u):
            for dj in range(u):
                gx[:, :, di : di + stride * Ho : stride, dj : dj + stride * Wo : stride] += (
                    gcols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
                )
        return (gx[0] if squeeze else gx), gk

    return _make(out[0] if squeeze else np.ascontiguousarray(out), (x, kernel), _bw, "conv2d")


def max_pool2d(x: Tensor, k: int = 2, stride: int = 2) -> Tensor:
    """Windowed maximum over the last two axes; ties route gradient to the
    first window element in row-major order."""
    xd = x.data
    H, W = xd.shape[-2:]
    if k > H or k > W:
        raise ShapeError(f"max_pool2d: window {k} larger than map {H}x{W}")
    lead = xd.shape[:-2]
    x3 = xd.reshape((-1, H, W))
    win = sliding_window_view(x3, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    n, Ho, Wo = win.shape[:3]
    flat = win.reshape(n, Ho, Wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def _bw(g):
        g3 = g.reshape(n, Ho, Wo)
        gx = np.zeros_like(x3)
        ii = np.arange(Ho)[None, :, None] * stride + arg // k
        jj = np.arange(Wo)[None, None, :] * stride + arg % k
        nn = np.broadcast_to(np.arange(n)[:, None, None], arg.shape)
        np.add.at(gx, (nn, ii, jj), g3)
        return (gx.reshape(xd.shape),)

    return _make(out.reshape(lead + (Ho, Wo)), (x,), _bw, "max_pool2d")


def parameters_of(tensors: Iterable[Tensor]) -> list:
    return [t for t in tensors if t.requires_grad]
