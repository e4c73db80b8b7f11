"""Dense float64 tensors with reverse-mode automatic differentiation.

Every numeric value in this package is a `Tensor`: a row-major float64
buffer plus an optional gradient slot. Operations record a tape of
`TapeNode`s while gradients are enabled; `backward` on a scalar replays
the tape in reverse and accumulates d(loss)/d(tensor) into the `grad`
slot of every tensor that requires it. Gradients add up across fan-out
and across repeated backward passes; callers zero them explicitly.

Tensors are treated as immutable once created (only `grad` and the
trainer's parameter updates touch them), so sharing buffers between
views is safe. Everything is float64 on purpose: the collapse metrics
downstream pseudo-invert near-singular scatter matrices and would not
survive single precision.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class NumericalError(ArithmeticError):
    """A computation produced or detected non-finite values."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (for evaluation passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class TapeNode:
    """One recorded operation: identifier, input tensors, backward rule.

    `backward_fn` maps the upstream gradient array to a tuple of gradient
    arrays aligned with `inputs` (entries may be None for inputs that do
    not need gradients).
    """

    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: tuple["Tensor", ...], backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    """N-dimensional float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: TapeNode | None = None

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
        return float(self.data)

    def detach(self) -> "Tensor":
        """Same buffer, cut off from the tape and from gradient tracking."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out.node = None
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # Operator sugar; the functional forms below are the primary API.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return subtract(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return multiply(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def from_op(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap an op result, recording a tape node if gradients are live.

    Used by this module and by the layer ops in `nn`; `data` is adopted
    without copying.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    track = _grad_enabled and any(t.requires_grad for t in inputs)
    out.requires_grad = track
    out.node = TapeNode(op, tuple(inputs), backward_fn) if track else None
    return out


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in t.node.inputs:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into `t.grad` for every tensor on the tape.

    `loss` must be a scalar produced by recorded operations. Gradients
    accumulate additively, both across fan-out within one pass and across
    repeated passes over freshly recorded tapes. The tape is discarded as
    it is consumed, so each recorded graph supports exactly one backward.
    """
    if loss.shape != ():
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        raise ContractError(
            "loss was not produced by recorded operations (tape empty or already consumed)"
        )
    order = _toposort(loss)
    flows: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    for t in reversed(order):
        g = flows.pop(id(t), None)
        if g is None:
            continue
        if t.requires_grad:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad = t.grad + g
        node = t.node
        if node is None:
            continue
        grads = node.backward_fn(g)
        for parent, pg in zip(node.inputs, grads):
            if pg is None:
                continue
            if not (parent.requires_grad or parent.node is not None):
                continue
            acc = flows.get(id(parent))
            flows[id(parent)] = pg if acc is None else acc + pg
        t.node = None  # discard the tape as we go to bound memory


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _binary_data(a: Tensor, b: Tensor, fn, name: str) -> np.ndarray:
    try:
        return fn(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from exc


# ---------------------------------------------------------------------------
# Elementwise and shape operations
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = _binary_data(a, b, np.add, "add")

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return from_op(data, (a, b), backward_fn, "add")


def subtract(a: Tensor, b: Tensor) -> Tensor:
    data = _binary_data(a, b, np.subtract, "subtract")

    def backward_fn(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return from_op(data, (a, b), backward_fn, "subtract")


def multiply(a: Tensor, b: Tensor) -> Tensor:
    data = _binary_data(a, b, np.multiply, "multiply")

    def backward_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return from_op(data, (a, b), backward_fn, "multiply")


def divide(a: Tensor, b: Tensor) -> Tensor:
    data = _binary_data(a, b, np.divide, "divide")

    def backward_fn(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return from_op(data, (a, b), backward_fn, "divide")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward_fn(g):
        return (g * s,)

    return from_op(a.data * s, (a,), backward_fn, "scale")


def negate(a: Tensor) -> Tensor:
    def backward_fn(g):
        return (-g,)

    return from_op(-a.data, (a,), backward_fn, "negate")


def exponential(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def backward_fn(g):
        return (g * data,)

    return from_op(data, (a,), backward_fn, "exp")


def logarithm(a: Tensor) -> Tensor:
    if a.data.size and a.data.min() <= 0.0:
        raise ContractError("logarithm requires strictly positive input")
    data = np.log(a.data)

    def backward_fn(g):
        return (g / a.data,)

    return from_op(data, (a,), backward_fn, "log")


def sqrt(a: Tensor) -> Tensor:
    if a.data.size and a.data.min() < 0.0:
        raise ContractError("sqrt requires non-negative input")
    data = np.sqrt(a.data)

    def backward_fn(g):
        return (g * (0.5 / data),)

    return from_op(data, (a,), backward_fn, "sqrt")


def power(a: Tensor, p: float) -> Tensor:
    """Elementwise a**p for a scalar exponent (positive base when p is non-integral)."""
    p = float(p)
    if p != int(p) and a.data.size and a.data.min() <= 0.0:
        raise ContractError("power with a non-integral exponent requires positive input")
    data = a.data ** p

    def backward_fn(g):
        return (g * p * a.data ** (p - 1.0),)

    return from_op(data, (a,), backward_fn, "power")


def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return from_op(data, (a,), backward_fn, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    data = a.data.mean(axis=axes, keepdims=keepdims)

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape),)

    return from_op(data, (a,), backward_fn, "mean")


def squared_norm(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Squared L2 norm along one axis: sum of squares."""
    ax = axis % a.ndim
    data = (a.data * a.data).sum(axis=ax, keepdims=keepdims)

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (2.0 * a.data * g,)

    return from_op(data, (a,), backward_fn, "squared_norm")


def reshape(a: Tensor, shape) -> Tensor:
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} to {tuple(shape)}") from exc

    def backward_fn(g):
        return (np.reshape(g, a.shape),)

    return from_op(data, (a,), backward_fn, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    data = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))

    def backward_fn(g):
        return (np.transpose(g, inv),)

    return from_op(data, (a,), backward_fn, "transpose")


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concatenate requires at least one tensor")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(
            f"concatenate: incompatible shapes {[t.shape for t in tensors]}"
        ) from exc
    ax = axis % data.ndim
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward_fn(g):
        return tuple(np.split(g, splits, axis=ax))

    return from_op(data, tuple(tensors), backward_fn, "concatenate")


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Broadcast over leading axes (and size-1 extents) to `shape`."""
    shape = tuple(shape)
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} to {shape}") from exc

    def backward_fn(g):
        return (_unbroadcast(g, a.shape),)

    return from_op(data, (a,), backward_fn, "broadcast")


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice `[start, start+length)` along one axis."""
    ax = axis % a.ndim
    if start < 0 or start + length > a.shape[ax]:
        raise ShapeError(
            f"narrow [{start}:{start + length}) out of range for axis {ax} of {a.shape}"
        )
    index = [slice(None)] * a.ndim
    index[ax] = slice(start, start + length)
    index = tuple(index)
    data = a.data[index]

    def backward_fn(g):
        full = np.zeros(a.shape)
        full[index] = g
        return (full,)

    return from_op(data, (a,), backward_fn, "narrow")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    data = a.data @ b.data

    def backward_fn(g):
        return g @ b.data.T, a.data.T @ g

    return from_op(data, (a, b), backward_fn, "matmul")


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` must map a tensor shaped like `x` to a scalar. Returns
    max_i |analytic_i - numeric_i| / max(1, |analytic_i|); the caller
    asserts against a threshold.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    probe = Tensor(x.data, requires_grad=True)
    out = f(probe)
    if not isinstance(out, Tensor) or out.shape != ():
        raise ContractError("f must return a scalar Tensor")
    if out.node is not None:
        out.backward()
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            bumped = flat.copy()
            bumped[i] += step
            hi = f(Tensor(bumped.reshape(x.shape))).item()
            bumped[i] -= 2.0 * step
            lo = f(Tensor(bumped.reshape(x.shape))).item()
            numeric[i] = (hi - lo) / (2.0 * step)

    a = analytic.reshape(-1)
    if a.size == 0:
        return 0.0
    denom = np.maximum(1.0, np.abs(a))
    return float(np.max(np.abs(a - numeric) / denom))
