"""Dense float64 tensors with reverse-mode differentiation.

Each operation returns a new :class:`Tensor` that remembers its parents and a
closure propagating the upstream gradient to them.  :func:`backward` orders the
recorded graph topologically (the tape) and replays the closures in reverse.

Only the operations needed by a small pre-norm transformer with sparse expert
layers are provided; broadcasting follows numpy and is undone on the way back.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

GELU_COEF = 0.044715
LN_EPS = 1e-5
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


class NonFiniteError(FloatingPointError):
    """Raised when a forward operation produces NaN or Inf."""


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(
        self,
        values,
        requires_grad: bool = False,
        parents: tuple["Tensor", ...] = (),
        backward_fn: Callable[[np.ndarray], None] | None = None,
        name: str | None = None,
    ):
        arr = np.asarray(values, dtype=np.float64)
        # a finite sum implies finite entries; only fall back to the full scan otherwise
        if not math.isfinite(arr.sum()) and not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite value produced{' in ' + name if name else ''}")
        self.values = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._backward = backward_fn
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def __len__(self) -> int:
        return len(self.values)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values)

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        # never in place: upstream arrays may be shared between parents
        self.grad = g if self.grad is None else self.grad + g

    def backward(self) -> None:
        backward(self)

    # arithmetic
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_grad(*ts: Tensor) -> bool:
    return any(t.requires_grad for t in ts)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _make(values, parents: Sequence[Tensor], fn, name: str) -> Tensor:
    req = _needs_grad(*parents)
    return Tensor(values, req, tuple(parents) if req else (), fn if req else None, name)


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.values + b.values, (a, b), fn, "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.values, (a,), lambda g: a._accumulate(-g), "neg")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.values, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.values, b.shape))

    return _make(a.values * b.values, (a, b), fn, "mul")


def power(a: Tensor, p: float) -> Tensor:
    out = a.values**p
    return _make(out, (a,), lambda g: a._accumulate(g * p * a.values ** (p - 1)), "pow")


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes (leading axes batch).

    A 2-D right operand is shared across every leading axis of ``a``; that case
    is flattened into a single 2-D product.
    """
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    flat = b.ndim == 2 and a.ndim > 2
    if flat:
        a2 = a.values.reshape(-1, a.shape[-1])
        out = (a2 @ b.values).reshape(a.shape[:-1] + (b.shape[1],))
    else:
        out = a.values @ b.values

    def fn(g):
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                a._accumulate((g2 @ b.values.T).reshape(a.shape))
            if b.requires_grad:
                b._accumulate(a2.T @ g2)
            return
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.values, -1, -2), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.swapaxes(a.values, -1, -2) @ g, b.shape))

    return _make(out, (a, b), fn, "matmul")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.values)
    return _make(out, (a,), lambda g: a._accumulate(g * out), "exp")


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.values), (a,), lambda g: a._accumulate(g / a.values), "log")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.values)
    return _make(out, (a,), lambda g: a._accumulate(g * (1.0 - out * out)), "tanh")


def gelu(a: Tensor) -> Tensor:
    """tanh-approximate GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    x = a.values
    u = _SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def fn(g):
        du = _SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x)
        a._accumulate(g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du))

    return _make(out, (a,), fn, "gelu")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        a._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _make(out, (a,), fn, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def fn(g):
        a._accumulate(g - probs * g.sum(axis=axis, keepdims=True))

    return _make(out, (a,), fn, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = LN_EPS) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then apply the affine."""
    d = x.shape[-1]
    if d < 2:
        raise ValueError("layer_norm needs a feature dimension > 1")
    mu = x.values.mean(axis=-1, keepdims=True)
    xc = x.values - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if gain is not None:
        out = out * gain.values
    if bias is not None:
        out = out + bias.values
    parents = tuple(t for t in (x, gain, bias) if t is not None)

    def fn(g):
        if gain is not None and gain.requires_grad:
            gain._accumulate(_unbroadcast(g * xhat, gain.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(_unbroadcast(g, bias.shape))
        if x.requires_grad:
            gx = g * gain.values if gain is not None else g
            x._accumulate(
                inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            )

    return _make(out, parents, fn, "layer_norm")


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.values.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _make(out, (a,), fn, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.values.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return sum_(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.values.reshape(shape), (a,), lambda g: a._accumulate(g.reshape(a.shape)), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.values, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, (a,), lambda g: a._accumulate(np.transpose(g, inv)), "transpose")


def take(a: Tensor, index) -> Tensor:
    """numpy-style indexing; repeated indices accumulate on the way back."""
    out = a.values[index]

    def fn(g):
        full = np.zeros_like(a.values)
        np.add.at(full, index, g)
        a._accumulate(full)

    return _make(out, (a,), fn, "take")


def index_add(shape: tuple[int, ...], rows: np.ndarray, src: Tensor) -> Tensor:
    """Zeros of ``shape`` with ``src[j]`` added into row ``rows[j]``."""
    out = np.zeros(shape)
    np.add.at(out, rows, src.values)
    return _make(out, (src,), lambda g: src._accumulate(g[rows]), "index_add")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = np.concatenate([t.values for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def fn(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _make(out, tensors, fn, "concat")


def where_const(mask: np.ndarray, a: Tensor, fill: float) -> Tensor:
    """``a`` where ``mask`` is true, the constant ``fill`` elsewhere."""
    out = np.where(mask, a.values, fill)
    return _make(out, (a,), lambda g: a._accumulate(_unbroadcast(np.where(mask, g, 0.0), a.shape)), "where")


def topo_order(root: Tensor) -> list[Tensor]:
    """The recorded tape: every tensor after all of its inputs."""
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
    if loss.values.size != 1:
        raise ValueError("backward() needs a scalar loss")
    if not loss.requires_grad:
        return
    order = topo_order(loss)
    # intermediate grads are scratch; leaves keep theirs
    for node in order:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.values)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in order:
        if node._backward is not None:
            node.grad = None


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
