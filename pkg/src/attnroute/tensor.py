"""Dense tensor arithmetic with reverse-mode differentiation.

A :class:`Tensor` wraps a row-major numpy array (float32 by default, float64
for gradient checks) and records the op that produced it. Calling
:func:`backward` on a scalar loss walks the recorded graph once in reverse
topological order and accumulates gradients into trainable leaves. Frozen
leaves (``requires_grad=False``) never receive gradients, but activation
gradients still flow through ops that consume them, which is what lets a
small trainable head learn through a frozen network.

Ops never mutate their inputs; optimizer steps may rewrite ``.data`` of leaf
parameters in place between graphs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

_GRAD_ENABLED = True

_GELU_C = math.sqrt(2.0 / math.pi)


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """Dense array plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- introspection ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, grad={self.requires_grad})"

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return narrow(self, idx)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis, keepdims)


def _as_tensor(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Wrap an op result; record the edge only when a parent is live."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    track = _GRAD_ENABLED and any(p.requires_grad or p._backward is not None for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    t.grad = g if t.grad is None else t.grad + g


# -- elementwise and structural ops ------------------------------------------


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    data = a.data + b.data
    na, nb = _tracked(a), _tracked(b)

    def back(g):
        return (
            _unbroadcast(g, a.shape) if na else None,
            _unbroadcast(g, b.shape) if nb else None,
        )

    return _make(data, (a, b), back)


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    data = a.data - b.data
    na, nb = _tracked(a), _tracked(b)

    def back(g):
        return (
            _unbroadcast(g, a.shape) if na else None,
            _unbroadcast(-g, b.shape) if nb else None,
        )

    return _make(data, (a, b), back)


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    data = a.data * b.data
    ad, bd = a.data, b.data
    na, nb = _tracked(a), _tracked(b)

    def back(g):
        return (
            _unbroadcast(g * bd, a.shape) if na else None,
            _unbroadcast(g * ad, b.shape) if nb else None,
        )

    return _make(data, (a, b), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; stacked (batched) on leading axes, numpy semantics."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)
    ad, bd = a.data, b.data
    na, nb = _tracked(a), _tracked(b)

    def back(g):
        ga = _unbroadcast(np.matmul(g, bd.swapaxes(-1, -2)), a.shape) if na else None
        gb = _unbroadcast(np.matmul(ad.swapaxes(-1, -2), g), b.shape) if nb else None
        return (ga, gb)

    return _make(data, (a, b), back)


def reshape(t: Tensor, shape) -> Tensor:
    data = t.data.reshape(shape)
    orig = t.shape

    def back(g):
        return (g.reshape(orig),)

    return _make(data, (t,), back)


def transpose(t: Tensor, axes=None) -> Tensor:
    data = t.data.transpose(axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))

    def back(g):
        return (g.transpose(inv),)

    return _make(data, (t,), back)


def narrow(t: Tensor, idx) -> Tensor:
    """Slice view (basic slices / ints only); backward scatters into zeros."""
    data = t.data[idx]
    shape, dtype = t.shape, t.data.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return _make(data, (t,), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, tuple(tensors), back)


def tsum(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = t.data.sum(axis=axis, keepdims=keepdims)
    shape = t.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(data), (t,), back)


def tmean(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = t.data.size if axis is None else np.prod([t.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(t, axis, keepdims), 1.0 / float(count))


# -- nonlinear ops ------------------------------------------------------------


def sigmoid(t: Tensor) -> Tensor:
    x = t.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)

    def back(g):
        return (g * y * (1.0 - y),)

    return _make(y, (t,), back)


def gelu(t: Tensor) -> Tensor:
    """Smooth ramp (tanh form); gradient at 0 is exactly 0.5."""
    x = t.data
    x2 = x * x
    u = _GELU_C * x * (1.0 + 0.044715 * x2)
    th = np.tanh(u)
    half_ramp = 0.5 * (1.0 + th)
    y = x * half_ramp

    def back(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        dy = half_ramp + 0.5 * x * (1.0 - th * th) * du
        return (g * dy,)

    return _make(y, (t,), back)


def softmax_lastdim(t: Tensor) -> Tensor:
    """Row-stabilized softmax over the last axis; rows sum to 1."""
    x = t.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return ((g - dot) * y,)

    return _make(y, (t,), back)


def layer_norm(t: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if gain.shape != t.shape[-1:] or bias.shape != t.shape[-1:]:
        raise ShapeError(f"layer_norm affine shape {gain.shape} vs features {t.shape[-1:]}")
    x = t.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data
    n = x.shape[-1]
    reduce_axes = tuple(range(x.ndim - 1))

    def back(g):
        dgain = (g * xhat).sum(axis=reduce_axes)
        dbias = g.sum(axis=reduce_axes)
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True) / n
        )
        return (dx, dgain, dbias)

    return _make(y, (t, gain, bias), back)


def embed(tokens: np.ndarray, table: Tensor) -> Tensor:
    """Row lookup into an embedding table; backward scatter-adds."""
    tokens = np.asarray(tokens)
    vocab = table.shape[0]
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab):
        raise IndexError(f"token id out of range [0, {vocab}): {tokens.min()}..{tokens.max()}")
    data = table.data[tokens]

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, tokens, g)
        return (gt,)

    return _make(data, (table,), back)


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_index: int = -1) -> Tensor:
    """Mean negative log-likelihood over target positions.

    ``targets`` has the logits shape minus the class axis; positions equal to
    ``ignore_index`` contribute nothing to the loss or the gradient.
    """
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets {targets.shape} vs logits {logits.shape}")
    vocab = logits.shape[-1]
    live = targets != ignore_index
    if not live.any():
        raise ContractError("cross_entropy: no live target positions")
    ids = np.where(live, targets, 0)
    if ids.min() < 0 or ids.max() >= vocab:
        raise IndexError(f"target id out of range [0, {vocab})")
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=-1, keepdims=True)
    logp = x - m - np.log(z)
    picked = np.take_along_axis(logp, ids[..., None], axis=-1)[..., 0]
    count = int(live.sum())
    loss = -(picked * live).sum() / count

    def back(g):
        p = e / z
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, ids[..., None], 1.0, axis=-1)
        dx = (p - onehot) * live[..., None]
        return (dx * (float(g) / count),)

    return _make(np.asarray(loss, dtype=x.dtype), (logits,), back)


# -- graph walk ----------------------------------------------------------------


@dataclass
class GradGraph:
    """Reverse-topological view of the op DAG reachable from one output."""

    order: list  # Tensors, output first; each visited exactly once in backward


def build_graph(root: Tensor) -> GradGraph:
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
    order.reverse()
    return GradGraph(order)


def backward(loss: Tensor) -> GradGraph:
    """Propagate d(loss)/d(leaf) into ``.grad`` of every trainable leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = build_graph(loss)
    loss.grad = np.ones_like(loss.data)
    for node in graph.order:
        fn = node._backward
        if fn is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, fn(node.grad)):
            if g is not None and (parent.requires_grad or parent._backward is not None):
                _accum(parent, g)
        if node is not loss and node._backward is not None:
            node.grad = None  # op results are transient; free as we go
    return graph


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- finite-difference oracle ----------------------------------------------------


@dataclass
class FiniteDiffReport:
    max_rel_err: float
    worst_param: int
    worst_coord: int
    passed: bool
    tol: float


def finite_diff_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-6,
    floor: float = 1e-3,
) -> FiniteDiffReport:
    """Compare analytic gradients of ``fn()`` against central differences.

    ``fn`` must be deterministic and rebuild its graph from the current
    ``.data`` of ``params`` on every call; run it in float64. Relative error
    per coordinate uses ``max(floor, |analytic|, |fd|)`` as the denominator so
    vanishing gradients are judged on an absolute scale.
    """
    zero_grads(params)
    loss = fn()
    backward(loss)
    analytic = [None if p.grad is None else p.grad.copy() for p in params]

    worst = (0.0, -1, -1)
    for pi, p in enumerate(params):
        a = analytic[pi]
        if a is None:
            a = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        aflat = a.reshape(-1)
        for ci in range(flat.size):
            keep = flat[ci]
            flat[ci] = keep + h
            up = fn().item()
            flat[ci] = keep - h
            down = fn().item()
            flat[ci] = keep
            fd = (up - down) / (2.0 * h)
            rel = abs(aflat[ci] - fd) / max(floor, abs(aflat[ci]), abs(fd))
            if rel > worst[0]:
                worst = (rel, pi, ci)
    zero_grads(params)
    return FiniteDiffReport(worst[0], worst[1], worst[2], worst[0] <= tol, tol)
