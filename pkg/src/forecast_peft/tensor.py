"""Reverse-mode automatic differentiation over numpy arrays.

Every differentiable operation returns a :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to parent gradients. The
chain of those records is the tape; :meth:`Tensor.backward` walks it once in
reverse topological order.

Arrays are float32 unless a leaf is created with float64 data, in which case
the whole graph built on it stays float64 (used by :func:`gradcheck`).
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True

MASK_VALUE = -1e9
LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


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


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """An n-d float array that can take part in reverse-mode differentiation."""

    __array_priority__ = 100
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- construction -----------------------------------------------------
    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- introspection ----------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- backward ---------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every trainable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
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

    # -- operators ----------------------------------------------------------
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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method forms -------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims: bool = False):
        return tmax(self, axis, keepdims)

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

    def tanh(self):
        return tanh(self)

    def abs(self):
        return tabs(self)


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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, every node after all of its inputs."""
    return _topological_order(root)


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _wrap(b, a)
    b = _wrap(b)
    return _wrap(a, b), b


# -- elementwise ------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return Tensor._make(a.data + b.data, (a, b),
                        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return Tensor._make(a.data - b.data, (a, b),
                        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return Tensor._make(a.data * b.data, (a, b),
                        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * out / b.data, b.shape)
        return ga, gb

    return Tensor._make(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent
    return Tensor._make(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return Tensor._make(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._make(out, (a,), lambda g: (g * (1 - out * out),))


def tabs(a: Tensor) -> Tensor:
    return Tensor._make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``cond`` holds, else ``b``. ``cond`` is a constant mask."""
    a, b = _pair(a, b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)

    def backward(g):
        zero = np.zeros((), dtype=g.dtype)
        return (_unbroadcast(np.where(cond, g, zero), a.shape),
                _unbroadcast(np.where(cond, zero, g), b.shape))

    return Tensor._make(out, (a, b), backward)


# -- reductions ---------------------------------------------------------------
def _expand(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)) if g.ndim else g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return Tensor._make(np.asarray(out, dtype=a.dtype), (a,),
                        lambda g: (np.array(_expand(g, a.shape, axis, keepdims)),))


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size // max(np.asarray(out).size, 1)
    return Tensor._make(np.asarray(out, dtype=a.dtype), (a,),
                        lambda g: (np.array(_expand(g, a.shape, axis, keepdims)) / count,))


def tmax(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Maximum along ``axis``; ties share the gradient equally."""
    out_k = a.data.max(axis=axis, keepdims=True)
    hit = (a.data == out_k).astype(a.dtype)
    hit /= hit.sum(axis=axis, keepdims=True)
    out = out_k if keepdims else (out_k.reshape(()) if axis is None else np.squeeze(out_k, axis=axis))
    return Tensor._make(out, (a,), lambda g: (hit * _expand(g, a.shape, axis, keepdims),))


# -- shape ------------------------------------------------------------------
def reshape(a: Tensor, shape) -> Tensor:
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return Tensor._make(np.broadcast_to(a.data, shape), (a,), lambda g: (_unbroadcast(g, a.shape),))


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def backward(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._make(np.array(out), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return Tensor._make(out, tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    return Tensor._make(out, tensors,
                        lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))))


# -- linear algebra -----------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``a[..., p, q] @ b[..., q, r]``."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else y + bias


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None, kernel: int, stride: int = 1,
           padding: int = 0) -> Tensor:
    """1-D convolution over the middle axis of ``x[N, S, Cin]``.

    ``weight`` is (kernel * Cin, Cout), laid out window-major.
    """
    N, S, Cin = x.shape
    if weight.shape[0] != kernel * Cin:
        raise ShapeError(f"conv1d weight {weight.shape} does not fit kernel={kernel}, Cin={Cin}")
    if padding:
        z = Tensor(np.zeros((N, padding, Cin), dtype=x.dtype))
        x = concat([z, x, z], axis=1)
    L_out = (S + 2 * padding - kernel) // stride + 1
    idx = np.arange(L_out)[:, None] * stride + np.arange(kernel)[None, :]
    windows = x[:, idx, :].reshape(N, L_out, kernel * Cin)
    return linear(windows, weight, bias)


# -- fused activations and normalization --------------------------------------
def gelu(x: Tensor) -> Tensor:
    """GeLU, tanh approximation."""
    d = x.data
    inner = _GELU_C * (d + 0.044715 * d ** 3)
    t = np.tanh(inner)
    out = 0.5 * d * (1 + t)

    def backward(g):
        dinner = _GELU_C * (1 + 3 * 0.044715 * d * d)
        return (g * (0.5 * (1 + t) + 0.5 * d * (1 - t * t) * dinner),)

    return Tensor._make(out.astype(d.dtype, copy=False), (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = d.shape[-1]

    def backward(g):
        gx = gg = gb = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = inv / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        if gamma.requires_grad:
            gg = _unbroadcast(g * xhat, gamma.shape)
        if beta.requires_grad:
            gb = _unbroadcast(g, beta.shape)
        return gx, gg, gb

    return Tensor._make(out.astype(d.dtype, copy=False), (x, gamma, beta), backward)


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
              key_padding_mask: np.ndarray | None = None) -> Tensor:
    """Multi-head scaled dot-product attention on already projected q, k, v.

    ``q, k, v`` are ``[..., L, C]``; ``key_padding_mask`` is ``[..., L]`` and is
    True for keys that must receive zero weight.
    """
    *batch, L, C = q.shape
    if C % heads:
        raise ValueError(f"embedding dim {C} is not divisible by {heads} heads")
    d = C // heads
    lead = len(batch)

    def split(t: Tensor) -> Tensor:
        t = t.reshape(*t.shape[:-1], heads, d)
        axes = tuple(range(lead)) + (lead + 1, lead, lead + 2)
        return transpose(t, axes)

    qh, kh, vh = split(q), split(k), split(v)
    logits = matmul(qh, swapaxes(kh, -1, -2)) * (1.0 / math.sqrt(d))
    if key_padding_mask is not None:
        mask = np.asarray(key_padding_mask, dtype=bool)
        mask = np.expand_dims(mask, (-3, -2))
        logits = where(mask, np.asarray(MASK_VALUE, dtype=logits.dtype), logits)
    weights = softmax(logits, axis=-1)
    ctx = matmul(weights, vh)
    axes = tuple(range(lead)) + (lead + 1, lead, lead + 2)
    return transpose(ctx, axes).reshape(*batch, L, C)


def huber(x: Tensor, delta: float = 1.0) -> Tensor:
    """Elementwise Huber penalty of a residual."""
    a = tabs(x)
    quad = x * x * 0.5
    lin = a * delta - 0.5 * delta * delta
    return where(a.data <= delta, quad, lin)


# -- gradient checking ----------------------------------------------------------
def numerical_grad(fn: Callable[[], Tensor], leaf: Tensor, h: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of scalar ``fn()`` with respect to ``leaf``."""
    grad = np.zeros(leaf.shape, dtype=np.float64)
    flat = leaf.data.reshape(-1)
    out = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn().data.astype(np.float64).sum())
            flat[i] = orig - h
            fm = float(fn().data.astype(np.float64).sum())
            flat[i] = orig
            out[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error between two gradients."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def gradcheck(fn: Callable[..., Tensor], inputs: Iterable[np.ndarray | Tensor],
              h: float = 1e-3) -> float:
    """Worst relative error between backward() and central differences.

    ``fn`` receives float64 leaf tensors built from ``inputs`` and must return a
    tensor; its sum is differentiated. The check runs entirely in float64.
    """
    leaves = [Tensor(np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64),
                     requires_grad=True) for x in inputs]
    out = fn(*leaves)
    out.sum().backward()
    worst = 0.0
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros(leaf.shape)
        numeric = numerical_grad(lambda: fn(*leaves), leaf, h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
