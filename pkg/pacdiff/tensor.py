"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only first-order gradients are supported. A `Tape` is active inside its
`with` block; primitive ops whose inputs live on the active tape append a node
holding the op id, the input node ids and the values the vector-Jacobian
product needs. Tensors that were never watched are constants.

Broadcasting is limited to a trailing-suffix operand (bias style): in
`add(a, b)`, `b.shape` must equal `a.shape` or a suffix of it.
"""

from __future__ import annotations

import dataclasses
import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class BackwardError(ValueError):
    """Raised when backward is asked for something it cannot differentiate."""


@dataclasses.dataclass(frozen=True, eq=False)
class Tensor:
    """Row-major float64 array; `node` is its id on the tape that traced it."""

    data: np.ndarray
    node: int | None = None
    tape: Tape | None = dataclasses.field(default=None, repr=False)

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float64)
        if not data.flags.c_contiguous:
            data = np.ascontiguousarray(data)
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])


def tensor(values: Iterable | np.ndarray | float) -> Tensor:
    """Constant tensor from nested sequences or an array."""
    return Tensor(np.array(values, dtype=np.float64))


@dataclasses.dataclass(frozen=True)
class _Node:
    op: str
    inputs: tuple[int, ...]
    saved: tuple[np.ndarray, ...]
    shape: tuple[int, ...]


# Each thread traces onto its own stack of active tapes.
_LOCAL = threading.local()


def _active_stack() -> list[Tape]:
    stack = getattr(_LOCAL, "tapes", None)
    if stack is None:
        stack = _LOCAL.tapes = []
    return stack


class Tape:
    """Append-only record of traced primitive ops.

    Node inputs always precede the node, so the node list is a topological
    order and backward is one reverse sweep.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.leaves: list[int] = []

    def __enter__(self) -> Tape:
        _active_stack().append(self)
        return self

    def __exit__(self, *exc_info: object) -> None:
        _active_stack().remove(self)

    def watch(self, value: Tensor | np.ndarray) -> Tensor:
        """Registers a leaf whose gradient backward will report."""
        data = value.data if isinstance(value, Tensor) else value
        data = np.array(data, dtype=np.float64)
        node = self._append("leaf", (), (), data.shape)
        self.leaves.append(node)
        return Tensor(data, node, self)

    def _append(
        self,
        op: str,
        inputs: tuple[int, ...],
        saved: tuple[np.ndarray, ...],
        shape: tuple[int, ...],
    ) -> int:
        for i in inputs:
            if i >= len(self.nodes):
                raise BackwardError(f"node input {i} does not precede node {len(self.nodes)}")
        self.nodes.append(_Node(op, inputs, saved, tuple(shape)))
        return len(self.nodes) - 1


def _active_tape() -> Tape | None:
    stack = _active_stack()
    return stack[-1] if stack else None


def _record(
    op: str,
    out: np.ndarray,
    args: Sequence[Tensor],
    saved: tuple[np.ndarray, ...] = (),
) -> Tensor:
    tape = _active_tape()
    if tape is None or not any(a.tape is tape for a in args):
        return Tensor(out)
    inputs = []
    for a in args:
        if a.tape is tape:
            inputs.append(a.node)
        else:
            # Constants enter the tape as frozen inputs so ids stay positional.
            inputs.append(tape._append("const", (), (), a.shape))
    node = tape._append(op, tuple(inputs), saved, out.shape)
    return Tensor(out, node, tape)


def _as_tensor(x: Tensor | np.ndarray | float) -> Tensor:
    return x if isinstance(x, Tensor) else tensor(x)


def _check_suffix(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    if len(sb) <= len(sa) and sa[len(sa) - len(sb):] == sb:
        return
    raise ShapeError(f"{op}: shapes {sa} and {sb} are incompatible")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_suffix(a, b, "add")
    return _record("add", a.data + b.data, (a, b))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_suffix(a, b, "sub")
    return _record("sub", a.data - b.data, (a, b))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_suffix(a, b, "mul")
    return _record("mul", a.data * b.data, (a, b), (a.data, b.data))


def scale(a: Tensor, factor: float) -> Tensor:
    a = _as_tensor(a)
    factor = float(factor)
    return _record("scale", a.data * factor, (a,), (np.array(factor),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    return _record("matmul", a.data @ b.data, (a, b), (a.data, b.data))


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return _record("relu", np.maximum(a.data, 0.0), (a,), (a.data > 0.0,))


def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _record("tanh", out, (a,), (out,))


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Concatenates along the last axis; leading dimensions must match."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != b.data.ndim or a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat: shapes {a.shape} and {b.shape} are incompatible")
    out = np.concatenate([a.data, b.data], axis=-1)
    return _record("concat", out, (a, b), (np.array(a.shape[-1]),))


def log_softmax(a: Tensor) -> Tensor:
    """Log-softmax over the last axis."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return _record("log_softmax", out, (a,), (out,))


def gather_log_prob(log_probs: Tensor, labels: Sequence[int] | np.ndarray) -> Tensor:
    """Picks `log_probs[i, labels[i]]` for every row."""
    log_probs = _as_tensor(log_probs)
    labels = np.asarray(labels, dtype=np.int64)
    if log_probs.data.ndim != 2 or labels.shape != (log_probs.shape[0],):
        raise ShapeError(
            f"gather_log_prob: shapes {log_probs.shape} and {labels.shape} are incompatible"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= log_probs.shape[1]):
        raise ShapeError(f"gather_log_prob: label outside [0, {log_probs.shape[1]})")
    out = log_probs.data[np.arange(labels.size), labels]
    return _record("gather", out, (log_probs,), (labels,))


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared differences over all entries."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} are incompatible")
    diff = a.data - b.data
    return _record("mse", np.array(np.mean(diff * diff)), (a, b), (diff,))


def sum(a: Tensor) -> Tensor:  # pylint: disable=redefined-builtin
    a = _as_tensor(a)
    return _record("sum", np.array(a.data.sum()), (a,))


def mean(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return _record("mean", np.array(a.data.mean()), (a,))


_Vjp = Callable[[_Node, np.ndarray, list[tuple[int, ...]]], tuple[np.ndarray, ...]]


def _vjp_add(node, g, shapes):
    return g.reshape(shapes[0]), _unbroadcast(g, shapes[1])


def _vjp_sub(node, g, shapes):
    return g.reshape(shapes[0]), -_unbroadcast(g, shapes[1])


def _vjp_mul(node, g, shapes):
    a, b = node.saved
    return g * b, _unbroadcast(g * a, shapes[1])


def _vjp_scale(node, g, shapes):
    return (g * float(node.saved[0]),)


def _vjp_matmul(node, g, shapes):
    a, b = node.saved
    return g @ b.T, a.T @ g


def _vjp_relu(node, g, shapes):
    return (g * node.saved[0],)


def _vjp_tanh(node, g, shapes):
    out = node.saved[0]
    return (g * (1.0 - out * out),)


def _vjp_concat(node, g, shapes):
    split = int(node.saved[0])
    return g[..., :split], g[..., split:]


def _vjp_log_softmax(node, g, shapes):
    probs = np.exp(node.saved[0])
    return (g - probs * g.sum(axis=-1, keepdims=True),)


def _vjp_gather(node, g, shapes):
    labels = node.saved[0]
    grad = np.zeros(shapes[0])
    grad[np.arange(labels.size), labels] = g
    return (grad,)


def _vjp_mse(node, g, shapes):
    diff = node.saved[0]
    grad = (2.0 / diff.size) * diff * g
    return grad, -grad


def _vjp_sum(node, g, shapes):
    return (np.full(shapes[0], float(g)),)


def _vjp_mean(node, g, shapes):
    size = int(np.prod(shapes[0], dtype=np.int64))
    return (np.full(shapes[0], float(g) / size),)


_VJPS: dict[str, _Vjp] = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul": _vjp_mul,
    "scale": _vjp_scale,
    "matmul": _vjp_matmul,
    "relu": _vjp_relu,
    "tanh": _vjp_tanh,
    "concat": _vjp_concat,
    "log_softmax": _vjp_log_softmax,
    "gather": _vjp_gather,
    "mse": _vjp_mse,
    "sum": _vjp_sum,
    "mean": _vjp_mean,
}


class Gradients:
    """Gradients of a scalar output, keyed by leaf node id."""

    def __init__(self, by_node: dict[int, np.ndarray]) -> None:
        self._by_node = by_node

    def __getitem__(self, leaf: Tensor) -> np.ndarray:
        if leaf.node not in self._by_node:
            raise KeyError(f"tensor with node {leaf.node} is not a leaf of this tape")
        return self._by_node[leaf.node]

    def __len__(self) -> int:
        return len(self._by_node)


def backward(tape: Tape, output: Tensor) -> Gradients:
    """Reverse sweep from a scalar output to every leaf of `tape`.

    Leaves the output does not depend on get zero gradients.
    """
    if output.tape is not tape or output.node is None:
        raise BackwardError("output was not traced on this tape")
    if output.data.size != 1:
        raise BackwardError(f"backward needs a scalar output, shape is {output.shape}")

    grads: dict[int, np.ndarray] = {output.node: np.ones(output.shape)}
    for node_id in range(output.node, -1, -1):
        node = tape.nodes[node_id]
        if node.op in ("leaf", "const"):
            continue
        g = grads.pop(node_id, None)
        if g is None:
            continue
        shapes = [tape.nodes[i].shape for i in node.inputs]
        for i, gi in zip(node.inputs, _VJPS[node.op](node, g, shapes), strict=True):
            if tape.nodes[i].op == "const":
                continue
            grads[i] = grads[i] + gi if i in grads else np.array(gi, dtype=np.float64)

    return Gradients(
        {leaf: grads.get(leaf, np.zeros(tape.nodes[leaf].shape)) for leaf in tape.leaves}
    )
