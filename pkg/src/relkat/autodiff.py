"""Reverse-mode automatic differentiation on dense float64 arrays.

A ``Tensor`` wraps a numpy array; operations build a graph of parent links
and local-gradient closures that ``backward`` replays in reverse topological
order.  Everything is 64-bit and sequential, so identical inputs produce
bit-identical outputs.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import (
    DegenerateVectorError,
    GradientError,
    NonFiniteError,
    ShapeMismatchError,
)

Array = np.ndarray

# per-thread so concurrent evaluation workers never share tape state
_local = threading.local()


def _recording() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Suspend graph recording (evaluation, teacher passes, embedding export)."""
    prev = _recording()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Tensor:
    """Dense float64 value with optional gradient tracking.

    ``grad`` is populated by ``backward`` on every tensor that requires a
    gradient; it always matches ``data`` in shape.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_local_grads", "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._local_grads: Callable[[Array], tuple[Array | None, ...]] | None = None
        self._backward_done = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Populate ``grad`` on every tracked tensor reachable from this scalar."""
        if self.data.size != 1:
            raise GradientError(f"backward requires a scalar loss, got shape {self.shape}")
        if self._backward_done:
            raise GradientError("backward already ran on this tensor; rebuild the graph first")
        self._backward_done = True

        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            fn = node._local_grads
            if fn is None or node.grad is None:
                continue
            for parent, contribution in zip(node._parents, fn(node.grad)):
                if contribution is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += contribution

    # Arithmetic sugar; constants are wrapped as untracked tensors.
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return mul(self, _wrap(-1.0))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _make(data: Array, parents: tuple[Tensor, ...], local_grads) -> Tensor:
    out = Tensor(data)
    if _recording() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._local_grads = local_grads
    return out


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``grad`` over axes that were broadcast up from ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeMismatchError("add", a.shape, b.shape) from None
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeMismatchError("sub", a.shape, b.shape) from None
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeMismatchError("mul", a.shape, b.shape) from None
    return _make(
        data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    data = a.data @ b.data
    return _make(data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeMismatchError("transpose", a.shape)
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,))


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    ndim = parts[0].data.ndim
    lead = parts[0].shape[:-1]
    if any(p.data.ndim != ndim or p.shape[:-1] != lead for p in parts):
        raise ShapeMismatchError("concat", *[p.shape for p in parts])
    data = np.concatenate([p.data for p in parts], axis=-1)
    widths = [p.shape[-1] for p in parts]
    bounds = np.cumsum(widths)[:-1]

    def local(g: Array):
        return tuple(np.split(g, bounds, axis=-1))

    return _make(data, tuple(parts), local)


def row(a: Tensor, i: int) -> Tensor:
    """Select row ``i`` of a matrix; the gradient scatters back into that row."""
    if a.data.ndim != 2:
        raise ShapeMismatchError("row", a.shape)
    if not 0 <= i < a.shape[0]:
        raise ShapeMismatchError("row", a.shape, (i,))

    def local(g: Array):
        out = np.zeros_like(a.data)
        out[i] = g
        return (out,)

    return _make(a.data[i].copy(), (a,), local)


def broadcast_rows(v: Tensor, n: int) -> Tensor:
    """Tile a vector into ``n`` identical rows; the gradient sums the rows."""
    if v.data.ndim != 1:
        raise ShapeMismatchError("broadcast_rows", v.shape)
    data = np.broadcast_to(v.data, (n, v.shape[0])).copy()
    return _make(data, (v,), lambda g: (g.sum(axis=0),))


def squeeze_lead(a: Tensor) -> Tensor:
    """Drop a leading axis of size 1."""
    if a.data.ndim < 1 or a.shape[0] != 1:
        raise ShapeMismatchError("squeeze_lead", a.shape)
    return _make(a.data[0].copy(), (a,), lambda g: (g[None, ...],))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    return _make(out, (a,), lambda g: (g * (a.data > 0.0),))


def sum_all(a: Tensor) -> Tensor:
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return _make(
        np.asarray(a.data.mean()),
        (a,),
        lambda g: (np.broadcast_to(g / n, a.shape).copy(),),
    )


def sum_last(a: Tensor) -> Tensor:
    """Sum over the last axis."""
    data = a.data.sum(axis=-1)
    return _make(data, (a,), lambda g: (np.broadcast_to(np.expand_dims(g, -1), a.shape).copy(),))


# ---------------------------------------------------------------------------
# normalization, similarity, losses
# ---------------------------------------------------------------------------


def l2_normalize(a: Tensor, _op: str = "l2_normalize") -> Tensor:
    """Scale rows (last axis) to unit Euclidean norm.  Zero rows are an error,
    never silently regularized."""
    norms = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    if np.any(norms == 0.0):
        raise DegenerateVectorError(_op)
    out = a.data / norms

    def local(g: Array):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return ((g - out * inner) / norms,)

    return _make(out, (a,), local)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Rowwise cosine of two equally shaped batches of vectors."""
    if a.shape != b.shape:
        raise ShapeMismatchError("cosine_similarity", a.shape, b.shape)
    return sum_last(mul(l2_normalize(a, "cosine_similarity"), l2_normalize(b, "cosine_similarity")))


def softmax_with_temperature(a: Tensor, tau: float) -> Tensor:
    """Softmax of ``a / tau`` along the last axis (temperature in the exponent)."""
    if not tau > 0.0:
        raise ValueError(f"softmax temperature must be positive, got {tau}")
    z = a.data / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def local(g: Array):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner) / tau,)

    return _make(out, (a,), local)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer class labels under the logits."""
    y = np.asarray(labels)
    if logits.data.ndim != 2 or y.ndim != 1 or y.shape[0] != logits.shape[0]:
        raise ShapeMismatchError("cross_entropy", logits.shape, y.shape)
    n, c = logits.shape
    if y.size and (y.min() < 0 or y.max() >= c):
        raise ValueError(f"cross_entropy: label out of range for {c} classes")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1)) + logits.data.max(axis=-1)
    picked = logits.data[np.arange(n), y]
    data = np.asarray((lse - picked).mean())

    def local(g: Array):
        p = np.exp(shifted)
        p /= p.sum(axis=-1, keepdims=True)
        p[np.arange(n), y] -= 1.0
        return (g * p / n,)

    return _make(data, (logits,), local)


def mean_squared_terms(a: Tensor) -> Tensor:
    """Mean of the squared entries."""
    n = a.data.size
    return _make(np.asarray((a.data * a.data).mean()), (a,), lambda g: (g * 2.0 * a.data / n,))


def frobenius_norm_squared(a: Tensor) -> Tensor:
    """Sum of the squared entries."""
    return _make(np.asarray((a.data * a.data).sum()), (a,), lambda g: (g * 2.0 * a.data,))


# ---------------------------------------------------------------------------
# optimization and auditing
# ---------------------------------------------------------------------------


@dataclass
class SgdConfig:
    """Plain stochastic gradient descent settings."""

    learning_rate: float = 0.003
    batch_size: int = 64

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be at least 1, got {self.batch_size}")


def sgd_step(params: Sequence[Tensor], config: SgdConfig) -> None:
    """In-place ``p -= lr * grad`` on every parameter; gradients are cleared."""
    for p in params:
        if p.grad is None:
            raise GradientError("sgd_step: parameter has no gradient")
    for p in params:
        p.data -= config.learning_rate * p.grad
        p.grad = None


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


def grad_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    epsilon: float = 1e-5,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``fn`` rebuilds the scalar loss from the current parameter values on every
    call.  The error for one entry is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must lie in [1e-7, 1e-3], got {epsilon}")
    zero_grads(params)
    loss = fn()
    loss.backward()
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params
    ]
    zero_grads(params)

    worst = 0.0
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        ana = analytic[pi].reshape(-1)
        if not np.all(np.isfinite(ana)):
            raise NonFiniteError("non-finite analytic gradient", context=f"param {pi}")
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + epsilon
            f_plus = float(fn().data)
            flat[j] = orig - epsilon
            f_minus = float(fn().data)
            flat[j] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NonFiniteError(
                    "non-finite value in central difference", context=f"param {pi}, entry {j}"
                )
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            err = abs(ana[j] - numeric) / max(1.0, abs(ana[j]))
            if err > worst:
                worst = err
    return worst
