"""Reverse-mode automatic differentiation over dense float64 arrays.

Every traced operation appends a node to a global tape in creation order,
which is a topological order by construction (an operation's inputs always
exist before its output). ``backward`` walks the tape once in reverse,
accumulating gradients into each tensor that requires them, then resets the
tape. A tape and its tensors belong to a single thread/process; parallel
workers each get their own module state.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np

from .errors import (
    ContractError,
    DegenerateInputError,
    DimensionError,
    DomainError,
)

__all__ = [
    "Tensor",
    "Tape",
    "active_tape",
    "no_grad",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "unary",
    "sigmoid",
    "tanh",
    "leaky_relu",
    "log",
    "exp",
    "reduce",
    "tensor_sum",
    "mean",
    "variance_population",
    "softmax",
    "clamp",
    "reshape",
    "take_rows",
    "narrow",
    "stack",
    "select_step",
    "finite_diff_check",
]


class Tensor:
    """Dense float64 array that may participate in gradient recording.

    ``grad`` accumulates across backward passes until cleared by the caller
    (the optimizer clears it after each step), so a value used twice in one
    graph receives the sum of both contributions.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tape_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; floats and arrays lift to constant tensors.
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)


class Tape:
    """Append-only record of traced operations in creation order."""

    def __init__(self):
        # Each entry is (output tensor, backward closure); leaves are
        # registered with a None closure so every participating tensor has a
        # tape_id.
        self.nodes: list[tuple[Tensor, Callable[[np.ndarray], None] | None]] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        for t, _ in self.nodes:
            t.tape_id = None
        self.nodes.clear()


_tape = Tape()
_grad_enabled = True


def active_tape() -> Tape:
    return _tape


@contextlib.contextmanager
def no_grad():
    """Disable tracing inside the block (evaluation / finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _register_leaf(t: Tensor) -> None:
    t.tape_id = len(_tape.nodes)
    _tape.nodes.append((t, None))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    requires = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires)
    if requires:
        for p in parents:
            if p.requires_grad and p.tape_id is None:
                _register_leaf(p)
        out.tape_id = len(_tape.nodes)
        _tape.nodes.append((out, backward_fn))
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss: Tensor) -> None:
    """Propagate d(loss)/d(tensor) to every requires_grad ancestor of ``loss``.

    ``loss`` must be a traced scalar. The tape is consumed: after this call it
    is empty and ready for the next forward pass. Gradients land in ``.grad``
    and add to whatever was already there.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape_id is None:
        raise ContractError("loss is not part of a traced computation")
    loss.grad = np.ones_like(loss.data)
    for out, fn in reversed(_tape.nodes[: loss.tape_id + 1]):
        if fn is not None and out.grad is not None:
            fn(out.grad)
    _tape.reset()


# ---------------------------------------------------------------------------
# Elementwise arithmetic (numpy broadcasting, gradients summed back to shape)
# ---------------------------------------------------------------------------


def _check_broadcast(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(
            f"{opname}: shapes {a.shape} and {b.shape} do not broadcast"
        ) from None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a: Tensor, b) -> Tensor:
    b = _lift(b)
    _check_broadcast(a, b, "add")
    out_data = a.data + b.data

    def back(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(out_data, (a, b), back)


def sub(a: Tensor, b) -> Tensor:
    b = _lift(b)
    _check_broadcast(a, b, "sub")
    out_data = a.data - b.data

    def back(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _result(out_data, (a, b), back)


def mul(a: Tensor, b) -> Tensor:
    b = _lift(b)
    _check_broadcast(a, b, "mul")
    out_data = a.data * b.data

    def back(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(out_data, (a, b), back)


def div(a: Tensor, b) -> Tensor:
    b = _lift(b)
    _check_broadcast(a, b, "div")
    out_data = a.data / b.data

    def back(g):
        _accumulate(a, _unbroadcast(g / b.data, a.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _result(out_data, (a, b), back)


def neg(a: Tensor) -> Tensor:
    def back(g):
        _accumulate(a, -g)

    return _result(-a.data, (a,), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product a[m,k] @ b[k,n]."""
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(
            f"matmul expects 2-D operands, got {a.shape} and {b.shape}"
        )
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dims differ, {a.shape} vs {b.shape}")
    out_data = a.data @ b.data

    def back(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _result(out_data, (a, b), back)


# ---------------------------------------------------------------------------
# Unary elementwise maps
# ---------------------------------------------------------------------------


def unary(x: Tensor, kind: str, alpha: float = 0.01) -> Tensor:
    """Elementwise map; ``kind`` in {sigmoid, tanh, leaky_relu, log, exp}."""
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    if kind == "leaky_relu":
        return leaky_relu(x, alpha)
    if kind == "log":
        return log(x)
    if kind == "exp":
        return exp(x)
    raise ContractError(f"unknown unary kind {kind!r}")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # Evaluate via exp of a non-positive argument on both branches so large
    # |x| never overflows.
    pos = d >= 0
    e = np.exp(np.where(pos, -d, d))
    y = np.where(pos, 1.0 / (1.0 + e), e / (1.0 + e))

    def back(g):
        _accumulate(x, g * y * (1.0 - y))

    return _result(y, (x,), back)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def back(g):
        _accumulate(x, g * (1.0 - y * y))

    return _result(y, (x,), back)


def leaky_relu(x: Tensor, alpha: float = 0.01) -> Tensor:
    d = x.data
    y = np.where(d >= 0, d, alpha * d)

    def back(g):
        _accumulate(x, g * np.where(d >= 0, 1.0, alpha))

    return _result(y, (x,), back)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DomainError("log of a non-positive value")
    y = np.log(x.data)

    def back(g):
        _accumulate(x, g / x.data)

    return _result(y, (x,), back)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)

    def back(g):
        _accumulate(x, g * y)

    return _result(y, (x,), back)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def _check_reduce_extent(x: Tensor, axis) -> int:
    n = x.size if axis is None else x.shape[axis]
    if n == 0:
        raise DegenerateInputError("reduction over an empty extent")
    return n


def reduce(x: Tensor, kind: str, axis=None, keepdims: bool = False) -> Tensor:
    """Reduction; ``kind`` in {sum, mean, variance_population}."""
    if kind == "sum":
        return tensor_sum(x, axis=axis, keepdims=keepdims)
    if kind == "mean":
        return mean(x, axis=axis, keepdims=keepdims)
    if kind == "variance_population":
        return variance_population(x, axis=axis, keepdims=keepdims)
    raise ContractError(f"unknown reduce kind {kind!r}")


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    _check_reduce_extent(x, axis)
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape).copy())

    return _result(out_data, (x,), back)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = _check_reduce_extent(x, axis)
    out_data = x.data.mean(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g / n, x.shape).copy())

    return _result(out_data, (x,), back)


def variance_population(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Population variance E[(x - E[x])^2]; composed from traced primitives."""
    _check_reduce_extent(x, axis)
    m = mean(x, axis=axis, keepdims=True)
    d = sub(x, m)
    return mean(mul(d, d), axis=axis, keepdims=keepdims)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``; rows sum to 1."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        _accumulate(x, (g - inner) * y)

    return _result(y, (x,), back)


# ---------------------------------------------------------------------------
# Shape / selection ops
# ---------------------------------------------------------------------------


def clamp(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip values to [lo, hi]; gradient passes through the interior only."""
    y = np.clip(x.data, lo, hi)
    mask = np.ones_like(x.data)
    if lo is not None:
        mask = mask * (x.data >= lo)
    if hi is not None:
        mask = mask * (x.data <= hi)

    def back(g):
        _accumulate(x, g * mask)

    return _result(y, (x,), back)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    y = x.data.reshape(shape)

    def back(g):
        _accumulate(x, g.reshape(x.shape))

    return _result(y, (x,), back)


def take_rows(x: Tensor, indices) -> Tensor:
    """Select rows of a 2-D (or entries of a 1-D) tensor by index array.

    Backward scatter-adds, so repeated indices accumulate.
    """
    idx = np.asarray(indices, dtype=np.intp)
    y = x.data[idx]

    def back(g):
        buf = np.zeros_like(x.data)
        np.add.at(buf, idx, g)
        _accumulate(x, buf)

    return _result(y, (x,), back)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` extents along ``axis``."""
    if not (0 <= start and start + length <= x.shape[axis]):
        raise DimensionError(
            f"narrow: [{start}, {start + length}) outside axis {axis} of {x.shape}"
        )
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    y = x.data[sl]

    def back(g):
        buf = np.zeros_like(x.data)
        buf[sl] = g
        _accumulate(x, buf)

    return _result(y, (x,), back)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Stack equal-shaped tensors along a new axis."""
    parts = list(tensors)
    if not parts:
        raise DegenerateInputError("stack of zero tensors")
    y = np.stack([p.data for p in parts], axis=axis)

    def back(g):
        for i, p in enumerate(parts):
            _accumulate(p, np.take(g, i, axis=axis))

    return _result(y, tuple(parts), back)


def select_step(x: Tensor, t: int) -> Tensor:
    """Pick step ``t`` from a (batch, steps, dim) tensor -> (batch, dim)."""
    if x.ndim != 3:
        raise DimensionError(f"select_step expects a 3-D tensor, got {x.shape}")
    b, _, d = x.shape
    return reshape(narrow(x, 1, t, 1), (b, d))


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------


def finite_diff_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between backward and central finite differences.

    ``f`` maps ``x`` to a traced scalar and must rebuild its graph on every
    call (it may close over ``x`` and other tensors; only ``x`` is perturbed).
    Relative error uses max(|analytic|, |numeric|, 1e-8) as denominator.
    The global tape is reset; call between training steps, not inside one.
    """
    saved_grad = x.grad
    x.grad = None
    _tape.reset()
    out = f(x)
    if not isinstance(out, Tensor) or out.size != 1:
        raise ContractError("finite_diff_check needs f to return a scalar Tensor")
    backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = saved_grad

    numeric = np.zeros_like(x.data)
    it = np.nditer(x.data, flags=["multi_index"])
    with no_grad():
        for _ in it:
            ix = it.multi_index
            orig = x.data[ix]
            x.data[ix] = orig + eps
            fp = float(f(x).data.reshape(()))
            x.data[ix] = orig - eps
            fm = float(f(x).data.reshape(()))
            x.data[ix] = orig
            numeric[ix] = (fp - fm) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if x.size else 0.0
