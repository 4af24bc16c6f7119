"""Tape-based reverse-mode automatic differentiation over float64 arrays.

Usage::

    w = Tensor(np.zeros(3), requires_grad=True)
    with Tape() as tape:
        loss = squared_l2(w - target)
    grads = backward(loss, tape, {"w": w})

Operations executed while a tape is active record a node whenever one of
their inputs requires a gradient. Outside of a tape nothing is recorded and
outputs never require gradients, which doubles as a no-grad mode.

Elementwise binary ops accept operands of equal shape, or one operand whose
shape equals the other's shape with the leading (batch) extent dropped.
"""

from __future__ import annotations

import contextvars
import itertools
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "KINDS",
    "as_tensor",
    "primitive_forward",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "sin",
    "cos",
    "tanh",
    "relu",
    "sum_",
    "mean",
    "squared_l2",
    "backward",
]

KINDS = (
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "sin",
    "cos",
    "tanh",
    "relu",
    "sum",
    "mean",
    "squared-l2",
)

_uids = itertools.count()
_tape_ids = itertools.count()
_active: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("vdc_tape", default=None)


class ShapeError(ValueError):
    """Operand shapes do not conform to the primitive's rules."""


class NonFiniteError(ArithmeticError):
    """A NaN or infinity showed up where only finite values are allowed."""


class Tensor:
    """Dense float64 array that may take part in gradient recording."""

    __slots__ = ("data", "requires_grad", "tape_id", "uid", "_tape")

    def __init__(self, data: Any, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.tape_id: int | None = None
        self.uid = next(_uids)
        self._tape: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self.tape_id is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(other, self)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("only division by a scalar constant is supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def as_tensor(value: Any) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass
class Node:
    kind: str
    inputs: tuple[Tensor, ...]
    parents: tuple[int | None, ...]
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


@dataclass
class Tape:
    """Ordered record of primitive applications.

    Node ``i`` only ever refers to parents with index ``< i``, so walking the
    list backwards visits every node once in reverse topological order.
    """

    nodes: list[Node] = field(default_factory=list)
    id: int = field(default_factory=lambda: next(_tape_ids))

    def __enter__(self) -> "Tape":
        self._token = _active.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.reset(self._token)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, kind: str, inputs: Sequence[Tensor], out: Tensor, vjp) -> None:
        parents = tuple(t.tape_id if t._tape == self.id else None for t in inputs)
        out.tape_id = len(self.nodes)
        out._tape = self.id
        out.requires_grad = True
        self.nodes.append(Node(kind, tuple(inputs), parents, vjp))


def _emit(kind: str, inputs: Sequence[Tensor], value: np.ndarray, vjp) -> Tensor:
    out = Tensor(value)
    tape = _active.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(kind, inputs, out, vjp)
    return out


def _broadcast_check(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.shape[1:] == b.shape or b.shape[1:] == a.shape:
        return
    raise ShapeError(f"{kind}: cannot combine shapes {a.shape} and {b.shape}")


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return grad.sum(axis=0)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.data + b.data, lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", (a, b), a.data - b.data, lambda g: (_reduce_to(g, sa), -_reduce_to(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    da, db = a.data, b.data
    return _emit(
        "mul",
        (a, b),
        da * db,
        lambda g: (_reduce_to(g * db, da.shape), _reduce_to(g * da, db.shape)),
    )


def scale(a, c: float) -> Tensor:
    """Multiply by a constant real ``c``."""
    a = as_tensor(a)
    c = float(c)
    if not np.isfinite(c):
        raise NonFiniteError(f"scale: non-finite factor {c}")
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    da, db = a.data, b.data

    def vjp(g):
        if da.ndim == 2 and db.ndim == 2:
            return g @ db.T, da.T @ g
        if da.ndim == 1 and db.ndim == 2:
            return db @ g, np.outer(da, g)
        if da.ndim == 2:
            return np.outer(g, db), da.T @ g
        return g * db, g * da

    return _emit("matmul", (a, b), da @ db, vjp)


def sin(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _emit("sin", (a,), np.sin(x), lambda g: (g * np.cos(x),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _emit("cos", (a,), np.cos(x), lambda g: (-g * np.sin(x),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _emit("tanh", (a,), y, lambda g: (g * (1.0 - y * y),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0.0  # subgradient 0 at the kink
    return _emit("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def _check_axis(kind: str, a: Tensor, axis: int | None) -> None:
    if axis not in (None, 0) or (axis == 0 and a.ndim == 0):
        raise ShapeError(f"{kind}: unsupported axis {axis} for shape {a.shape}")


def sum_(a, axis: int | None = None) -> Tensor:
    """Sum of all entries, or over the leading extent when ``axis=0``."""
    a = as_tensor(a)
    _check_axis("sum", a, axis)
    shape = a.shape
    return _emit("sum", (a,), a.data.sum(axis=axis), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    _check_axis("mean", a, axis)
    shape = a.shape
    n = a.data.size if axis is None else shape[0]
    return _emit(
        "mean",
        (a,),
        a.data.mean(axis=axis),
        lambda g: (np.broadcast_to(g / n, shape).copy(),),
    )


def squared_l2(a) -> Tensor:
    """Sum of squared entries."""
    a = as_tensor(a)
    x = a.data
    return _emit("squared-l2", (a,), np.asarray(np.dot(x.ravel(), x.ravel())), lambda g: (2.0 * g * x,))


_DISPATCH: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "sin": sin,
    "cos": cos,
    "tanh": tanh,
    "relu": relu,
    "sum": sum_,
    "mean": mean,
    "squared-l2": squared_l2,
}


def primitive_forward(kind: str, inputs: Sequence[Any], **kwargs) -> Tensor:
    """Apply primitive ``kind`` by name; ``scale`` takes ``factor=``."""
    if kind == "scale":
        (a,) = inputs
        return scale(a, kwargs["factor"])
    try:
        fn = _DISPATCH[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    return fn(*inputs, **kwargs)


def backward(loss: Tensor, tape: Tape, wrt: Mapping[Any, Tensor]) -> dict[Any, Tensor]:
    """Gradients of the scalar ``loss`` with respect to each tensor in ``wrt``.

    Keys of the result are the keys of ``wrt``. Tensors that did not take part
    in the recorded computation, or that do not require gradients, get zeros.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    targets = {t.uid for t in wrt.values() if t.requires_grad}
    grads_out: dict[int, np.ndarray] = {}
    if loss._tape == tape.id and loss.tape_id is not None:
        node_grads: dict[int, np.ndarray] = {loss.tape_id: np.ones(())}
        for idx in range(loss.tape_id, -1, -1):
            g = node_grads.pop(idx, None)
            if g is None:
                continue
            node = tape.nodes[idx]
            for inp, parent, gin in zip(node.inputs, node.parents, node.vjp(g)):
                if gin is None or not inp.requires_grad:
                    continue
                if parent is not None:
                    prev = node_grads.get(parent)
                    node_grads[parent] = gin if prev is None else prev + gin
                elif inp.uid in targets:
                    prev = grads_out.get(inp.uid)
                    grads_out[inp.uid] = gin if prev is None else prev + gin
    result = {}
    for key, t in wrt.items():
        g = grads_out.get(t.uid)
        result[key] = Tensor(np.zeros(t.shape) if g is None else np.array(g, dtype=np.float64))
    return result
