"""Dense float64 tensors with a reverse-mode differentiation tape.

Every value in the package flows through :class:`Tensor`: feature maps,
recurrent states, weights, logits and losses. Tensors are immutable after
construction; operations produce new tensors and, when a :class:`Tape` is
active and an input participates in differentiation, record a node holding
the backward rule. All arithmetic is 64-bit so finite-difference checks
have headroom.

Storage and elementwise arithmetic are delegated to numpy; the tape, the
recording discipline and all backward rules are local to this module and
:mod:`vnact.ops`.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import expit

from .errors import NonFiniteError, ShapeError, TapeError

_uid_counter = itertools.count(1)

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def active_tape() -> Optional["Tape"]:
    """The innermost tape currently recording, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """An immutable dense array, optionally tracked on a tape.

    Attributes:
        data: row-major float64 ndarray, marked read-only.
        shape: tuple of extents.
        grad_enabled: whether this tensor participates in differentiation.
        tape_node: node id assigned by the most recent tape that recorded
            this tensor, or None. Leaf parameters receive their id lazily,
            the first time an operation consumes them under an active tape.
    """

    __slots__ = ("data", "grad_enabled", "tape_node", "uid")

    def __init__(self, data, grad_enabled: bool = False):
        arr = np.array(data, dtype=np.float64, order="C")
        arr.flags.writeable = False
        self.data = arr
        self.grad_enabled = grad_enabled
        self.tape_node: Optional[int] = None
        self.uid = next(_uid_counter)

    @classmethod
    def _wrap(cls, arr: np.ndarray, grad_enabled: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        # np.ascontiguousarray would promote 0-d arrays to 1-d; keep rank.
        arr = np.asarray(arr, dtype=np.float64, order="C")
        if not arr.flags.c_contiguous or arr.base is not None and arr.flags.writeable:
            arr = arr.copy(order="C")
        arr.flags.writeable = False
        t.data = arr
        t.grad_enabled = grad_enabled
        t.tape_node = None
        t.uid = next(_uid_counter)
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, grad_enabled={self.grad_enabled})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return subtract(self, _as_tensor(other))

    def __rsub__(self, other):
        return subtract(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return hadamard(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def tensor(data, grad_enabled: bool = False) -> Tensor:
    """Construct a tensor from array-like data (copies)."""
    return Tensor(data, grad_enabled=grad_enabled)


def zeros(shape, grad_enabled: bool = False) -> Tensor:
    return Tensor._wrap(np.zeros(shape), grad_enabled=grad_enabled)


class TapeNode:
    """One recorded operation: kind, parent node ids, backward rule.

    ``backward`` maps the adjoint of this node's output to a tuple of
    adjoint contributions aligned with ``parents`` (None for inputs that
    need no gradient). Leaf nodes carry ``backward=None`` and remember the
    tensor they stand for.
    """

    __slots__ = ("kind", "parents", "backward", "leaf")

    def __init__(self, kind: str, parents: tuple, backward, leaf: Optional[Tensor] = None):
        self.kind = kind
        self.parents = parents
        self.backward = backward
        self.leaf = leaf


class Tape:
    """Ordered record of one forward computation.

    Nodes are appended in execution order, so the node list is always a
    valid topological order (parents precede children). A tape supports
    exactly one backward traversal; traversing again without re-recording
    raises :class:`TapeError`. Use as a context manager::

        with Tape() as tape:
            loss = model(...)
        grads = tape.backward(loss)
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self._node_of_uid: dict[int, int] = {}
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise TapeError("tape context exited out of order")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def node_of(self, t: Tensor) -> Optional[int]:
        return self._node_of_uid.get(t.uid)

    def _ensure_leaf(self, t: Tensor) -> int:
        nid = self._node_of_uid.get(t.uid)
        if nid is None:
            nid = len(self.nodes)
            self.nodes.append(TapeNode("leaf", (), None, leaf=t))
            self._node_of_uid[t.uid] = nid
            t.tape_node = nid
        return nid

    def _record(self, kind: str, parent_ids: tuple, backward, out: Tensor) -> int:
        nid = len(self.nodes)
        self.nodes.append(TapeNode(kind, parent_ids, backward))
        self._node_of_uid[out.uid] = nid
        out.tape_node = nid
        return nid

    def backward(self, loss: Tensor) -> dict[int, Tensor]:
        """Traverse the tape once, returning gradients for grad-enabled leaves.

        The result maps each leaf tensor's ``uid`` to its gradient tensor.
        Fan-out is accumulated; the traversal order is the exact reverse of
        the recording order, so results are bit-deterministic. The tape is
        consumed by this call.
        """
        if self.consumed:
            raise TapeError("tape already traversed; re-record the forward pass")
        self.consumed = True
        loss_nid = self._node_of_uid.get(loss.uid)
        if loss_nid is None:
            raise TapeError("loss tensor was not recorded on this tape")
        if loss.data.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")

        adjoints: list[Optional[np.ndarray]] = [None] * len(self.nodes)
        adjoints[loss_nid] = np.ones_like(loss.data)
        for nid in range(loss_nid, -1, -1):
            node = self.nodes[nid]
            grad_out = adjoints[nid]
            if grad_out is None or node.backward is None:
                continue
            contributions = node.backward(grad_out)
            for pid, contrib in zip(node.parents, contributions):
                if pid is None or contrib is None:
                    continue
                prev = adjoints[pid]
                # Never accumulate in place: contributions may alias saved data.
                adjoints[pid] = contrib if prev is None else prev + contrib
            adjoints[nid] = None

        grads: dict[int, Tensor] = {}
        for nid, node in enumerate(self.nodes):
            if node.leaf is not None and node.leaf.grad_enabled and adjoints[nid] is not None:
                grads[node.leaf.uid] = Tensor._wrap(adjoints[nid])
        return grads


def backward(tape: Tape, loss: Tensor) -> dict[int, Tensor]:
    """Functional form of :meth:`Tape.backward`."""
    return tape.backward(loss)


def apply_op(
    kind: str,
    inputs: Sequence[Tensor],
    out_data: np.ndarray,
    backward_fn: Optional[Callable],
) -> Tensor:
    """Wrap an op result, check finiteness, and record it if a tape is active."""
    if not np.isfinite(out_data).all():
        raise NonFiniteError(f"operation '{kind}' produced non-finite values")
    tape = active_tape()
    if tape is not None and backward_fn is not None and any(t.grad_enabled for t in inputs):
        out = Tensor._wrap(out_data, grad_enabled=True)
        parent_ids = tuple(
            tape.node_of(t) if tape.node_of(t) is not None
            else (tape._ensure_leaf(t) if t.grad_enabled else None)
            for t in inputs
        )
        tape._record(kind, parent_ids, backward_fn, out)
        return out
    return Tensor._wrap(out_data)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over axes that were broadcast in the forward pass."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcastable(a: np.ndarray, b: np.ndarray, kind: str) -> None:
    for na, nb in zip(a.shape[::-1], b.shape[::-1]):
        if na != nb and na != 1 and nb != 1:
            raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} are not broadcastable")


# ---------------------------------------------------------------------------
# elementwise operations


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcastable(a.data, b.data, "add")
    with np.errstate(over="ignore"):
        out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return apply_op("add", (a, b), out, bwd)


def subtract(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcastable(a.data, b.data, "subtract")
    with np.errstate(over="ignore"):
        out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return apply_op("subtract", (a, b), out, bwd)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcastable(a.data, b.data, "hadamard")
    with np.errstate(over="ignore"):
        out = a.data * b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return apply_op("hadamard", (a, b), out, bwd)


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    with np.errstate(over="ignore"):
        out = a.data * factor

    def bwd(g):
        return (g * factor,)

    return apply_op("scale", (a,), out, bwd)


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return apply_op("sigmoid", (a,), out, bwd)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return apply_op("tanh", (a,), out, bwd)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return apply_op("exp", (a,), out, bwd)


def log(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(a.data)
    ad = a.data

    def bwd(g):
        return (g / ad,)

    return apply_op("log", (a,), out, bwd)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    mask = a.data > 0.0

    def bwd(g):
        return (g * mask,)

    return apply_op("relu", (a,), out, bwd)


_ELEMENTWISE_UNARY = {
    "sigmoid": sigmoid,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "relu": relu,
}

_ELEMENTWISE_BINARY = {
    "add": add,
    "subtract": subtract,
    "hadamard": hadamard,
}


def elementwise(op_kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by kind: add/subtract/hadamard/scale/sigmoid/tanh/exp/log/relu.

    ``scale`` takes a python float as ``b``; the other binary kinds take a
    tensor broadcastable against ``a`` by singleton axes.
    """
    if op_kind == "scale":
        if not isinstance(b, (int, float)):
            raise ShapeError("scale expects a scalar factor")
        return scale(a, b)
    if op_kind in _ELEMENTWISE_BINARY:
        if b is None:
            raise ShapeError(f"{op_kind} expects two operands")
        return _ELEMENTWISE_BINARY[op_kind](a, _as_tensor(b))
    if op_kind in _ELEMENTWISE_UNARY:
        if b is not None:
            raise ShapeError(f"{op_kind} expects one operand")
        return _ELEMENTWISE_UNARY[op_kind](a)
    raise ShapeError(f"unknown elementwise kind '{op_kind}'")
