"""Reverse-mode automatic differentiation on a dynamic tape.

Every primitive records a tape node whose vector-Jacobian product is itself
composed of these same primitives, so gradients can be differentiated again
(``grad(..., create_graph=True)``).  The primitive set is deliberately
smooth: there is no ReLU or other piecewise-linear function, because the
objectives built on top of this engine take second derivatives everywhere.

All buffers are 64-bit floats.  Broadcasting is restricted to leading-axis
expansion (the smaller shape must be a suffix of the larger one); anything
fancier is rejected so that every VJP stays auditable.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "TapeNode",
    "ShapeMismatchError",
    "ClassIndexError",
    "constant",
    "leaf",
    "as_tensor",
    "no_record",
    "is_recording",
    "add",
    "sub",
    "mul",
    "scalar_mul",
    "square",
    "exp",
    "softplus",
    "sigmoid",
    "log_softmax",
    "gather_nll",
    "matmul",
    "grad",
    "finite_diff_gradient",
]

_SEQ = itertools.count()
_RECORDING = [True]


class ShapeMismatchError(ValueError):
    """Operand shapes do not conform for the named operation."""

    def __init__(self, op: str, *shapes: tuple):
        self.op = op
        self.shapes = shapes
        pretty = " vs ".join(str(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {pretty}")


class ClassIndexError(IndexError):
    """A class index lies outside [0, num_classes)."""

    def __init__(self, op: str, index: int, num_classes: int):
        self.op = op
        self.index = index
        self.num_classes = num_classes
        super().__init__(f"{op}: class index {index} outside [0, {num_classes})")


@contextmanager
def no_record():
    """Suspend tape recording; results inside are plain constants."""
    _RECORDING.append(False)
    try:
        yield
    finally:
        _RECORDING.pop()


def is_recording() -> bool:
    return _RECORDING[-1]


class TapeNode:
    """One recorded primitive application.

    ``seq`` is a global creation counter; because operands are always created
    before their consumers, sorting reachable nodes by ``seq`` descending
    replays VJPs in strict reverse topological order, each exactly once.
    """

    __slots__ = ("seq", "parents", "vjp", "op")

    def __init__(self, parents: tuple, vjp, op: str):
        self.seq = next(_SEQ)
        self.parents = parents
        self.vjp = vjp
        self.op = op


class Tensor:
    """Shape + float64 buffer + optional tape node.

    A Tensor without a node participates in arithmetic as a constant.
    """

    __slots__ = ("data", "node")

    def __init__(self, data, node: TapeNode | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.node = node

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def on_tape(self) -> bool:
        return self.node is not None

    def item(self) -> float:
        return float(self.data)

    def sum(self, axis: int | None = None) -> "Tensor":
        return _sum(self, axis)

    def reshape(self, shape) -> "Tensor":
        return _reshape(self, tuple(shape))

    def transpose(self) -> "Tensor":
        return _transpose(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        tag = f" op={self.node.op}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tag})"


def constant(data) -> Tensor:
    """Off-tape value; gradients do not flow into it."""
    return Tensor(data)


def leaf(data) -> Tensor:
    """On-tape leaf, i.e. a differentiable input such as a parameter array."""
    arr = np.array(data, dtype=np.float64)
    return Tensor(arr, TapeNode((), None, "leaf"))


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _record(out_data: np.ndarray, parents: tuple, vjp, op: str) -> Tensor:
    if is_recording() and any(p.node is not None for p in parents):
        return Tensor(out_data, TapeNode(parents, vjp, op))
    return Tensor(out_data)


def _suffix_compatible(a: tuple, b: tuple) -> bool:
    small, big = (a, b) if len(a) <= len(b) else (b, a)
    return big[len(big) - len(small):] == small


def _check_elementwise(op: str, a: Tensor, b: Tensor) -> None:
    if not _suffix_compatible(a.shape, b.shape):
        raise ShapeMismatchError(op, a.shape, b.shape)


def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    # Broadcasting only ever prepends axes, so summing leading axes undoes it.
    while g.data.ndim > len(shape):
        g = _sum(g, axis=0)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("add", a, b)

    def vjp(g: Tensor):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.data + b.data, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("sub", a, b)

    def vjp(g: Tensor):
        return _unbroadcast(g, a.shape), _unbroadcast(scalar_mul(g, -1.0), b.shape)

    return _record(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("mul", a, b)

    def vjp(g: Tensor):
        return _unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)

    return _record(a.data * b.data, (a, b), vjp, "mul")


def scalar_mul(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def vjp(g: Tensor):
        return (scalar_mul(g, c),)

    return _record(a.data * c, (a,), vjp, "scalar_mul")


def square(a) -> Tensor:
    a = as_tensor(a)

    def vjp(g: Tensor):
        return (scalar_mul(mul(g, a), 2.0),)

    return _record(np.square(a.data), (a,), vjp, "square")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def vjp(g: Tensor):
        return (mul(g, out),)

    out = _record(out_data, (a,), vjp, "exp")
    return out


def softplus(a) -> Tensor:
    a = as_tensor(a)

    def vjp(g: Tensor):
        return (mul(g, sigmoid(a)),)

    return _record(np.logaddexp(0.0, a.data), (a,), vjp, "softplus")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out_data = 1.0 / (1.0 + np.exp(-np.abs(a.data)))
    out_data = np.where(a.data >= 0, out_data, 1.0 - out_data)

    def vjp(g: Tensor):
        return (mul(g, mul(out, sub(1.0, out))),)

    out = _record(out_data, (a,), vjp, "sigmoid")
    return out


def _sum(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    ndim = a.data.ndim
    if axis is not None:
        if ndim == 0:
            raise ShapeMismatchError("sum", a.shape)
        axis = axis % ndim
        if axis not in (0, ndim - 1):
            raise ShapeMismatchError(f"sum(axis={axis})", a.shape)
    out_data = a.data.sum(axis=axis)

    def vjp(g: Tensor):
        if axis is None or ndim == 1:
            return (mul(constant(np.ones(a.shape)), g),)
        if axis == 0:
            # g has the trailing shape; leading-axis broadcast expands it back.
            return (mul(constant(np.ones(a.shape)), g),)
        # Last axis: tile g along it via an outer product with a row of ones.
        lead = int(np.prod(a.shape[:-1]))
        last = a.shape[-1]
        col = _reshape(g, (lead, 1))
        tiled = matmul(col, constant(np.ones((1, last))))
        return (_reshape(tiled, a.shape),)

    return _record(out_data, (a,), vjp, "sum")


def _reshape(a, shape: tuple) -> Tensor:
    a = as_tensor(a)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeMismatchError("reshape", a.shape, tuple(shape))

    def vjp(g: Tensor):
        return (_reshape(g, a.shape),)

    return _record(a.data.reshape(shape), (a,), vjp, "reshape")


def _transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeMismatchError("transpose", a.shape)

    def vjp(g: Tensor):
        return (_transpose(g),)

    return _record(a.data.T.copy(), (a,), vjp, "transpose")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)

    def vjp(g: Tensor):
        return matmul(g, _transpose(b)), matmul(_transpose(a), g)

    return _record(a.data @ b.data, (a, b), vjp, "matmul")


def _log_softmax_data(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return shifted - lse


def log_softmax(a) -> Tensor:
    """Log-probabilities along the last axis of a 1-D or 2-D tensor."""
    a = as_tensor(a)
    if a.data.ndim not in (1, 2):
        raise ShapeMismatchError("log_softmax", a.shape)

    def vjp(g: Tensor):
        p = exp(out)
        row = _sum(g, axis=a.data.ndim - 1)
        if a.data.ndim == 1:
            return (sub(g, mul(p, row)),)
        n = a.shape[0]
        tiled = matmul(_reshape(row, (n, 1)), constant(np.ones((1, a.shape[1]))))
        return (sub(g, mul(p, tiled)),)

    out = _record(_log_softmax_data(a.data), (a,), vjp, "log_softmax")
    return out


def gather_nll(logits, classes) -> Tensor:
    """Per-row negative log-likelihood of the given class indices.

    ``logits`` is (n, C); ``classes`` is an int vector of length n.  Returns
    the vector of -log softmax(logits)[i, classes[i]].
    """
    logits = as_tensor(logits)
    if logits.data.ndim != 2:
        raise ShapeMismatchError("gather_nll", logits.shape)
    idx = np.asarray(classes)
    if idx.ndim != 1 or idx.shape[0] != logits.shape[0]:
        raise ShapeMismatchError("gather_nll", logits.shape, idx.shape)
    idx = idx.astype(np.int64)
    n, c = logits.shape
    if idx.size and (idx.min() < 0 or idx.max() >= c):
        bad = int(idx[(idx < 0) | (idx >= c)][0])
        raise ClassIndexError("gather_nll", bad, c)
    onehot = np.zeros((n, c))
    onehot[np.arange(n), idx] = 1.0

    def vjp(g: Tensor):
        p = exp(log_softmax(logits))
        tiled = matmul(_reshape(g, (n, 1)), constant(np.ones((1, c))))
        return (mul(tiled, sub(p, constant(onehot))),)

    out_data = -_log_softmax_data(logits.data)[np.arange(n), idx]
    return _record(out_data, (logits,), vjp, "gather_nll")


def _reverse_tape(output: Tensor) -> list[Tensor]:
    """Reachable on-tape tensors, most recently created first."""
    seen: set[int] = set()
    found: list[Tensor] = []
    stack = [output]
    while stack:
        t = stack.pop()
        if t.node is None or id(t.node) in seen:
            continue
        seen.add(id(t.node))
        found.append(t)
        stack.extend(t.node.parents)
    found.sort(key=lambda t: t.node.seq, reverse=True)
    return found


def grad(output: Tensor, inputs: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of a scalar output with respect to each input.

    With ``create_graph`` the returned tensors are themselves on-tape, so a
    further ``grad`` call yields second derivatives.  Inputs that the output
    does not depend on get zero tensors rather than an error.
    """
    if output.data.shape != ():
        raise ValueError(f"grad: output must be scalar, got shape {output.data.shape}")
    if output.node is None:
        raise ValueError("grad: output is not on the tape")
    for i, t in enumerate(inputs):
        if t.node is None:
            raise ValueError(f"grad: input {i} is not on the tape")

    cot: dict[int, Tensor] = {id(output.node): constant(1.0)}

    def backward():
        for t in _reverse_tape(output):
            node = t.node
            if node.vjp is None:
                continue
            g = cot.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if parent.node is None or pg is None:
                    continue
                key = id(parent.node)
                prev = cot.get(key)
                cot[key] = pg if prev is None else add(prev, pg)

    if create_graph:
        backward()
    else:
        with no_record():
            backward()

    results = []
    for t in inputs:
        g = cot.get(id(t.node))
        results.append(g if g is not None else constant(np.zeros(t.shape)))
    return results


def finite_diff_gradient(f: Callable[[np.ndarray], float], point, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient oracle: (f(x+h e_i) - f(x-h e_i)) / 2h."""
    if h <= 0:
        raise ValueError("finite_diff_gradient: h must be positive")
    x = np.asarray(point, dtype=np.float64).copy()
    out = np.zeros_like(x)
    flat = x.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(x)
        flat[i] = orig - h
        down = f(x)
        flat[i] = orig
        out.ravel()[i] = (up - down) / (2.0 * h)
    return out
