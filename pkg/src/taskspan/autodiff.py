"""Reverse-mode automatic differentiation on dense float64 arrays.

A Tensor wraps a numpy float64 array. Operations executed while gradients
are enabled record parent links and a vector-Jacobian closure; backward()
walks the resulting graph once in reverse topological order and returns a
gradient map. Each training step builds a fresh graph, so there is no
global tape to reset.

Broadcasting is deliberately restricted: the only implicit broadcast is a
bias vector added over the batch dimension. Everything else must match
shapes exactly, which turns silent shape bugs into immediate errors.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Optional

import numpy as np

LOG_2 = math.log(2.0)
LOG_2PI = math.log(2.0 * math.pi)


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class GraphError(RuntimeError):
    """The differentiation contract was violated (e.g. non-scalar loss)."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (target nets, rollouts)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


def _as_f64(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    return arr


class Tensor:
    """Immutable-by-convention float64 array node in the computation graph.

    `data` is only mutated by the optimizer between steps, never while a
    graph referencing the tensor is alive.
    """

    __slots__ = ("data", "requires_grad", "_parents", "_vjp")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: tuple = (),
        vjp: Optional[Callable[[np.ndarray], tuple]] = None,
    ):
        self.data = _as_f64(data)
        self.requires_grad = bool(requires_grad)
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def assert_finite(self, what: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite values in {what}")
        return self

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; constants are plain python floats
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_const(self, float(other))

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_const(self, -float(other))

    def __rsub__(self, other):
        return add_const(neg(self), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data) -> Tensor:
    """Constant leaf (no gradient)."""
    return Tensor(data, requires_grad=False)


def param(data) -> Tensor:
    """Trainable leaf; backward() reports a gradient for it."""
    return Tensor(data, requires_grad=True)


def _node(data: np.ndarray, parents: tuple, vjp) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, vjp=vjp)
    return Tensor(data, requires_grad=False)


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; also supports bias-add of a vector over a batch."""
    if a.shape == b.shape:
        out = a.data + b.data

        def vjp(g):
            return g, g

        return _node(out, (a, b), vjp)
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        out = a.data + b.data

        def vjp(g):
            return g, g.sum(axis=0)

        return _node(out, (a, b), vjp)
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    out = a.data - b.data

    def vjp(g):
        return g, -g

    return _node(out, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    def vjp(g):
        return (-g,)

    return _node(-a.data, (a,), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors (or a scalar () tensor)."""
    if a.data.ndim == 0 or b.data.ndim == 0:
        if a.data.ndim == 0 and b.data.ndim != 0:
            a, b = b, a  # keep the array first
        out = a.data * b.data

        def vjp(g):
            return g * b.data, np.sum(g * a.data)

        return _node(out, (a, b), vjp)
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data * b.data

    def vjp(g):
        return g * b.data, g * a.data

    return _node(out, (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def vjp(g):
        return (g * c,)

    return _node(a.data * c, (a,), vjp)


def add_const(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def vjp(g):
        return (g,)

    return _node(a.data + c, (a,), vjp)


def square(a: Tensor) -> Tensor:
    def vjp(g):
        return (2.0 * a.data * g,)

    return _node(a.data * a.data, (a,), vjp)


def pow_const(a: Tensor, p: float) -> Tensor:
    p = float(p)
    out = a.data ** p

    def vjp(g):
        return (p * a.data ** (p - 1.0) * g,)

    return _node(out, (a,), vjp)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return _node(out, (a,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _node(out, (a, b), vjp)


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two batched matrices along axis 1."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_cols: incompatible shapes {a.shape} and {b.shape}")
    out = np.concatenate([a.data, b.data], axis=1)
    na = a.shape[1]

    def vjp(g):
        return g[:, :na], g[:, na:]

    return _node(out, (a, b), vjp)


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum())
    shp = a.shape

    def vjp(g):
        return (np.broadcast_to(g, shp).copy() if shp else np.asarray(g),)

    return _node(out, (a,), vjp)


def sum_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _node(out, (a,), vjp)


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    out = np.asarray(a.data.mean())
    shp = a.shape

    def vjp(g):
        return (np.broadcast_to(g / n, shp).copy(),)

    return _node(out, (a,), vjp)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise minimum; gradient routes to the smaller operand (ties: a)."""
    if a.shape != b.shape:
        raise ShapeError(f"minimum: incompatible shapes {a.shape} and {b.shape}")
    take_a = a.data <= b.data
    out = np.where(take_a, a.data, b.data)

    def vjp(g):
        return np.where(take_a, g, 0.0), np.where(take_a, 0.0, g)

    return _node(out, (a, b), vjp)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp with zero gradient outside [lo, hi]."""
    inside = (a.data >= lo) & (a.data <= hi)
    out = np.clip(a.data, lo, hi)

    def vjp(g):
        return (np.where(inside, g, 0.0),)

    return _node(out, (a,), vjp)


def stop_gradient(a: Tensor) -> Tensor:
    """Treat `a` as a constant: same values, no parents."""
    return Tensor(a.data, requires_grad=False)


# ---------------------------------------------------------------------------
# activations


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    out = np.where(mask, a.data, 0.0)

    def vjp(g):
        return (np.where(mask, g, 0.0),)

    return _node(out, (a,), vjp)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _node(out, (a,), vjp)


def softplus(a: Tensor) -> Tensor:
    # log(1 + e^x) written as logaddexp(0, x); never overflows
    out = np.logaddexp(0.0, a.data)

    def vjp(g):
        return (g / (1.0 + np.exp(-a.data)),)

    return _node(out, (a,), vjp)


def tanh_log_jacobian(u: Tensor) -> Tensor:
    """log(1 - tanh(u)^2) per element, in the stable form
    2*(log 2 - u - softplus(-2u)); exact even for large |u| where the
    direct expression underflows to log(0).
    """
    sp = softplus(scale(u, -2.0))
    return scale(add_const(sub(neg(u), sp), LOG_2), 2.0)


def gaussian_log_density(u: Tensor, mean: Tensor, log_std: Tensor) -> Tensor:
    """Per-element log N(u; mean, exp(log_std)^2). Shapes must match."""
    if not (u.shape == mean.shape == log_std.shape):
        raise ShapeError(
            f"gaussian_log_density: shapes {u.shape}, {mean.shape}, {log_std.shape}"
        )
    z = mul(sub(u, mean), exp(neg(log_std)))
    return neg(add_const(add(scale(square(z), 0.5), log_std), 0.5 * LOG_2PI))


def squashed_gaussian_log_prob(u: Tensor, mean: Tensor, log_std: Tensor) -> Tensor:
    """log-density of a = tanh(u) with u ~ N(mean, exp(log_std)^2), summed
    over the action dimension (axis 1). Returns shape (batch,).
    """
    base = gaussian_log_density(u, mean, log_std)
    corr = tanh_log_jacobian(u)
    return sum_axis(sub(base, corr), axis=1)


# ---------------------------------------------------------------------------
# parameter-bank views (contiguous column ranges of a (K, n) parameter matrix)


def bank_slice(phi: Tensor, start: int, stop: int, shape: tuple) -> Tensor:
    """View a contiguous column range of a (K, n) matrix as (K, *shape).

    Gradient scatters back into the full matrix, so several slices of one
    parameter matrix accumulate naturally.
    """
    if phi.data.ndim != 2:
        raise ShapeError(f"bank_slice: expected a 2-d matrix, got {phi.shape}")
    k, n = phi.shape
    width = int(np.prod(shape))
    if not (0 <= start <= stop <= n) or stop - start != width:
        raise ShapeError(
            f"bank_slice: range [{start}:{stop}) does not match shape {shape}"
        )
    out = phi.data[:, start:stop].reshape((k,) + tuple(shape))

    def vjp(g):
        full = np.zeros((k, n))
        full[:, start:stop] = g.reshape(k, width)
        return (full,)

    return _node(out, (phi,), vjp)


def bank_combine(w: Tensor, bank: Tensor) -> Tensor:
    """Weighted sum over the leading bank axis: sum_i w[i] * bank[i]."""
    if w.data.ndim != 1 or bank.shape[0] != w.shape[0]:
        raise ShapeError(f"bank_combine: incompatible shapes {w.shape} and {bank.shape}")
    out = np.tensordot(w.data, bank.data, axes=(0, 0))
    bank_axes = tuple(range(1, bank.data.ndim))

    def vjp(g):
        g = np.asarray(g)
        dw = np.tensordot(bank.data, g, axes=(bank_axes, tuple(range(g.ndim))))
        dbank = np.multiply.outer(w.data, g)
        return dw, dbank

    return _node(out, (w, bank), vjp)


def normalize_vector(w: Tensor) -> Tensor:
    """Project a vector onto the unit sphere: w / ||w||."""
    if w.data.ndim != 1:
        raise ShapeError(f"normalize_vector: expected a vector, got {w.shape}")
    inv_norm = pow_const(sum_all(square(w)), -0.5)
    return mul(w, inv_norm)


# ---------------------------------------------------------------------------
# backward


class GradientMap:
    """Mapping from graph tensors to d(loss)/d(tensor).

    Tensors never touched by the loss have gradient exactly zero, which
    `grad()` reports without storing anything.
    """

    def __init__(self, grads: dict):
        self._grads = grads

    def get(self, t: Tensor) -> Optional[np.ndarray]:
        return self._grads.get(t)

    def grad(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(t)
        if g is None:
            return np.zeros(t.shape)
        return g

    def __contains__(self, t: Tensor) -> bool:
        return t in self._grads

    def tensors(self) -> Iterable[Tensor]:
        return self._grads.keys()


def _topo_order(root: Tensor) -> list:
    """Reverse-ready topological order via iterative DFS (deep MLP graphs
    would overflow the recursion limit)."""
    order: list = []
    seen = set()
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> GradientMap:
    """Accumulate d(loss)/d(node) for every node reachable from `loss`.

    The loss must be a scalar. Gradients add across multiple-use paths.
    """
    if loss.data.shape != ():
        raise GraphError(f"backward: loss must be a scalar, got shape {loss.shape}")
    grads: dict = {loss: np.asarray(1.0)}
    if not loss.requires_grad:
        return GradientMap(grads)
    for node in reversed(_topo_order(loss)):
        g = grads.get(node)
        if g is None or node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if not parent.requires_grad or pg is None:
                continue
            acc = grads.get(parent)
            if acc is None:
                grads[parent] = pg
            else:
                grads[parent] = acc + pg
    return GradientMap(grads)
