"""
Dense float64 tensors with reverse-mode automatic differentiation.

Every network in the package (predictors, denoiser, mask generator) is built
from the primitives in this module. A forward pass records each primitive as
a node holding references to its parents and a closure that maps the output
gradient to parent gradients. `backward` walks that record once, in reverse
topological order, and accumulates into the `grad` buffers of the leaves.

Usage:
    w = Tensor(np.eye(2), requires_grad=True)
    x = Tensor([[1.0], [1.0]])
    loss = (w @ x).sum()
    backward(loss)
    w.grad  # -> [[1, 1], [1, 1]]
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from diffirm.errors import ContractError, DimensionError, NonFiniteError

Backward = Callable[[np.ndarray], Sequence[np.ndarray | None]]


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op}: non-finite values")


class Tensor:
    """N-dimensional array node on the autodiff tape.

    The data buffer is never mutated after construction; only `grad` changes
    (accumulated by `backward`, cleared by `zero_grad`).
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "Tensor")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Backward | None = None
        self._op = "leaf"
        self._consumed = False

    # ---------- construction helpers ----------

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple[Tensor, ...], backward: Backward, op: str) -> Tensor:
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        out._parents = parents if out.requires_grad else ()
        out._backward = backward if out.requires_grad else None
        out._op = op
        out._consumed = False
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._op == "leaf"

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # ---------- operator sugar ----------

    def __add__(self, other):
        return elementwise(self, other, "add")

    def __radd__(self, other):
        return elementwise(self, other, "add")

    def __sub__(self, other):
        return elementwise(self, other, "sub")

    def __rsub__(self, other):
        return scale(elementwise(self, other, "sub"), -1.0)

    def __mul__(self, other):
        return elementwise(self, other, "mul")

    def __rmul__(self, other):
        return elementwise(self, other, "mul")

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division is only defined by a constant scalar")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis: int | None = None) -> Tensor:
        return reduce_sum(self, axis)

    def mean(self, axis: int | None = None) -> Tensor:
        return reduce_mean(self, axis)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes) -> Tensor:
        return permute(self, axes)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _is_scalar(value) -> bool:
    if isinstance(value, Tensor):
        return value.data.ndim == 0
    return np.ndim(value) == 0


# =============================================
# PRIMITIVE OPS
# =============================================

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product; gradient flows to both operands."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")

    def _backward(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._from_op(a.data @ b.data, (a, b), _backward, "matmul")


def elementwise(a: Tensor, b, op: str) -> Tensor:
    """add | sub | mul on identical shapes; a scalar operand is the only broadcast."""
    a = as_tensor(a)
    if op not in ("add", "sub", "mul"):
        raise ContractError(f"unknown elementwise op {op!r}")

    b_scalar = _is_scalar(b)
    if not isinstance(b, Tensor):
        b = Tensor(b)
    if not b_scalar and a.ndim == 0:
        # scalar on the left: swap so the broadcast rule below applies
        if op == "sub":
            return scale(elementwise(b, a, "sub"), -1.0)
        return elementwise(b, a, op)
    if not b_scalar and a.shape != b.shape:
        raise DimensionError(f"elementwise {op}: shapes {a.shape} and {b.shape} differ")

    if op == "add":
        data = a.data + b.data
    elif op == "sub":
        data = a.data - b.data
    else:
        data = a.data * b.data

    def _backward(g):
        if op == "add":
            ga, gb = g, g
        elif op == "sub":
            ga, gb = g, -g
        else:
            ga, gb = g * b.data, g * a.data
        if b_scalar:
            gb = np.asarray(gb).sum().reshape(b.shape)
        return ga, gb

    return Tensor._from_op(data, (a, b), _backward, op)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a constant (no gradient to the constant)."""
    a = as_tensor(a)
    c = float(c)
    return Tensor._from_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def shift(a: Tensor, c: float) -> Tensor:
    """Add a constant."""
    a = as_tensor(a)
    c = float(c)
    return Tensor._from_op(a.data + c, (a,), lambda g: (g,), "shift")


def square(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return Tensor._from_op(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def activation(x: Tensor, kind: str) -> Tensor:
    """Pointwise relu | sigmoid | tanh | identity."""
    x = as_tensor(x)
    if kind == "identity":
        return x
    if kind == "relu":
        mask = x.data > 0
        return Tensor._from_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")
    if kind == "sigmoid":
        # tanh form stays finite for any finite input
        out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
        return Tensor._from_op(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")
    if kind == "tanh":
        out = np.tanh(x.data)
        return Tensor._from_op(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")
    raise ContractError(f"unknown activation {kind!r}")


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


def sigmoid(x: Tensor) -> Tensor:
    return activation(x, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    return activation(x, "tanh")


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis)
    shape = a.shape

    def _backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return Tensor._from_op(np.asarray(data), (a,), _backward, "sum")


def reduce_mean(a: Tensor, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return scale(reduce_sum(a, axis), 1.0 / count)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        data = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {tuple(shape)}") from exc
    original = a.shape
    return Tensor._from_op(data, (a,), lambda g: (g.reshape(original),), "reshape")


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"permute axes {axes} do not match rank {a.ndim}")
    inverse = tuple(np.argsort(axes))
    return Tensor._from_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "permute")


def take(a: Tensor, index) -> Tensor:
    """Basic or integer-array indexing; gradient scatters back with accumulation."""
    a = as_tensor(a)
    data = np.array(a.data[index])
    shape = a.shape
    parts = index if isinstance(index, tuple) else (index,)
    advanced = any(isinstance(p, (list, np.ndarray)) for p in parts)

    def _backward(g):
        full = np.zeros(shape)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return Tensor._from_op(data, (a,), _backward, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ContractError("concat of an empty sequence")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat shapes {[t.shape for t in tensors]} along axis {axis}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(data, tensors, _backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        t = as_tensor(t)
        shape = list(t.shape)
        shape.insert(axis if axis >= 0 else len(shape) + axis + 1, 1)
        expanded.append(reshape(t, shape))
    return concat(expanded, axis=axis)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with b added to every row; the one row-broadcast primitive."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if b.ndim != 1 or b.shape[0] != w.shape[-1]:
        raise DimensionError(f"affine bias {b.shape} does not match weight {w.shape}")
    prod = matmul(x, w)

    def _backward(g):
        return g, g.sum(axis=0)

    return Tensor._from_op(prod.data + b.data, (prod, b), _backward, "affine")


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean of squared differences; target may be a constant array."""
    pred = as_tensor(pred)
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss shapes {pred.shape} and {target.shape} differ")
    return reduce_mean(square(elementwise(pred, target, "sub")))


# =============================================
# TAPE AND BACKWARD
# =============================================

class Tape:
    """Topologically ordered record of the nodes reachable from a root.

    Parents always precede children in `nodes`. The order is produced by an
    iterative depth-first walk over the ordered parent tuples, so it is the
    same on every run.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def record(cls, root: Tensor) -> Tape:
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
            for parent in reversed(node._parents):
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def run(self, root: Tensor) -> None:
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else np.asarray(pg, dtype=np.float64)
        for node in self.nodes:
            if not node.is_leaf:
                node._consumed = True
                node._backward = None


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf's grad."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise ContractError("backward already ran on this graph; re-run the forward pass")
    if not loss.requires_grad:
        return
    if any(node._consumed for node in _walk_parents(loss)):
        raise ContractError("graph shares nodes with a consumed tape; re-run the forward pass")
    Tape.record(loss).run(loss)


def _walk_parents(root: Tensor) -> Iterable[Tensor]:
    stack, seen = [root], set()
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        yield node
        stack.extend(node._parents)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()
