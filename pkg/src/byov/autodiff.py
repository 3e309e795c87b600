"""Dense float64 tensors with a reverse-mode gradient tape.

Every tensor that takes part in a differentiable computation keeps references
to its parents and a closure mapping the upstream gradient to parent
gradients.  ``backward`` orders the graph topologically and visits every node
once.

Gradient accumulation contract: gradients are summed into ``leaf.grad`` on
every ``backward`` call, mirroring the usual deep-learning convention.  Call
``zero_grad`` (or set ``grad = None``) between steps.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""

    def __init__(self, op: str, shape: tuple[int, ...]):
        super().__init__(f"non-finite values produced by '{op}' (shape {list(shape)})")
        self.op = op
        self.shape = shape


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf", check_finite: bool = True):
        if op in ("leaf", "const") or not isinstance(data, np.ndarray) or data.dtype != np.float64:
            arr = np.array(data, dtype=np.float64)
        else:
            arr = data
        if arr.ndim > 0 and 0 in arr.shape:
            raise ShapeError(f"{op}: zero-sized dimension in shape {list(arr.shape)}")
        if check_finite and not np.isfinite(arr).all():
            raise NonFiniteError(op, arr.shape)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {list(self.shape)} is not a scalar")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data, op="detach", check_finite=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.shape)}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, op="const")


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data, op=op)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _shape_error(op: str, a: Tensor, b: Tensor) -> ShapeError:
    return ShapeError(f"{op}: incompatible shapes {list(a.shape)} and {list(b.shape)}")


def _check_binary(op: str, a: Tensor, b: Tensor) -> None:
    # same shape, a scalar operand, or a trailing-dims row vector (bias add)
    if a.shape == b.shape or a.data.size == 1 and a.ndim <= b.ndim or b.data.size == 1 and b.ndim <= a.ndim:
        return
    small, big = (a, b) if a.ndim < b.ndim else (b, a)
    if small.ndim >= 1 and small.ndim < big.ndim and big.shape[big.ndim - small.ndim:] == small.shape:
        return
    # keepdims reductions: [N, D] against [N, 1]
    if a.ndim == b.ndim and all(x == y or x == 1 or y == 1 for x, y in zip(a.shape, b.shape)):
        return
    raise _shape_error(op, a, b)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# elementwise binary ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("add", a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("sub", a, b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("mul", a, b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("div", a, b)
    out = a.data / b.data
    return _make("div", out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a, b)
    return _make("matmul", a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


# elementwise unary -----------------------------------------------------------

def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make("exp", out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _make("log", out, (x,), lambda g: (g / x.data,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _make("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return _make("relu", np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def square(x) -> Tensor:
    x = as_tensor(x)
    return _make("square", x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def abs_(x) -> Tensor:
    x = as_tensor(x)
    return _make("abs", np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


# reductions and shape ops -----------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    return axis % ndim


def sum_(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    ax = _norm_axis(axis, max(x.ndim, 1))
    out = np.sum(x.data, axis=ax, keepdims=keepdims)

    def bw(g):
        if ax is not None and not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make("sum", np.asarray(out, dtype=np.float64), (x,), bw)


def mean(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[_norm_axis(axis, x.ndim)]
    s = sum_(x, axis=axis, keepdims=keepdims)
    return mul(s, 1.0 / n)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {list(x.shape)} into {list(shape)}") from None
    return _make("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"transpose: expected rank 2, got shape {list(x.shape)}")
    return _make("transpose", x.data.T.copy(), (x,), lambda g: (g.T,))


def l2_norm(x, eps: float = 0.0) -> Tensor:
    """Euclidean norm along the last axis (keeps the axis).

    The gradient at an exactly-zero vector is defined as zero.
    """
    x = as_tensor(x)
    n = np.sqrt(np.sum(x.data * x.data, axis=-1, keepdims=True))

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            unit = np.where(n > 0, x.data / np.where(n > 0, n, 1.0), 0.0)
        return (g * unit,)

    return _make("l2_norm", n + eps, (x,), bw)


def normalize(x, eps: float = 1e-12) -> Tensor:
    x = as_tensor(x)
    return div(x, l2_norm(x, eps=eps))


def cosine_similarity(a, b, eps: float = 1e-12) -> Tensor:
    """Row-wise cosine similarity along the last axis; shape drops that axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise _shape_error("cosine_similarity", a, b)
    return sum_(mul(normalize(a, eps), normalize(b, eps)), axis=-1)


def softmax(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)

    return _make("softmax", out, (x,), bw)


def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * np.sum(g, axis=-1, keepdims=True),)

    return _make("log_softmax", out, (x,), bw)


def layer_norm(x, gain, shift, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gain`` and offset by ``shift``."""
    x, gain, shift = as_tensor(x), as_tensor(gain), as_tensor(shift)
    d = x.shape[-1]
    if gain.shape != (d,) or shift.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain {list(gain.shape)} / shift {list(shift.shape)} do not match feature dim {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + shift.data

    def bw(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make("layer_norm", out, (x, gain, shift), bw)


def patchify(x, patch: int) -> Tensor:
    """Split [N, C, H, W] images into non-overlapping patches -> [N * P, C * patch * patch].

    Together with a matmul this is a strided patch-embedding convolution.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"patchify: expected [N, C, H, W], got {list(x.shape)}")
    n, c, h, w = x.shape
    if h % patch or w % patch:
        raise ShapeError(f"patchify: spatial dims {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    out = (x.data.reshape(n, c, gh, patch, gw, patch)
           .transpose(0, 2, 4, 1, 3, 5)
           .reshape(n * gh * gw, c * patch * patch))

    def bw(g):
        return (g.reshape(n, gh, gw, c, patch, patch).transpose(0, 3, 1, 4, 2, 5).reshape(x.shape),)

    return _make("patchify", out, (x,), bw)


# backward -------------------------------------------------------------------

def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` with every node after all of its parents."""
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
    if loss.data.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {list(loss.shape)}")
    if not loss.requires_grad:
        raise RuntimeError("backward: loss is not attached to a gradient tape")
    order = topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
