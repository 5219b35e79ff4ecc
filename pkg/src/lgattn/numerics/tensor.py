"""Tensor value type and the append-only tape used for reverse-mode gradients."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from lgattn.errors import ContractError, ShapeError

DEFAULT_DTYPE = np.float32

_active_tapes: list["Tape"] = []


class Tensor:
    """Dense row-major array plus an optional gradient slot.

    The wrapped array is treated as immutable; every op returns a new tensor.
    Scalars are stored with shape ``(1,)``.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if dtype is None and not (isinstance(data, np.ndarray) and data.dtype.kind == "f"):
            dtype = DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(s < 1 for s in arr.shape):
            raise ShapeError(f"tensor dimensions must be >= 1, got {arr.shape}")
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from lgattn.numerics import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from lgattn.numerics import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from lgattn.numerics import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from lgattn.numerics import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from lgattn.numerics import ops
        if isinstance(other, Tensor):
            return ops.div(self, other)
        return ops.scale(self, 1.0 / other)

    def __neg__(self):
        from lgattn.numerics import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from lgattn.numerics import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from lgattn.numerics import ops
        return ops.getitem(self, index)

    def reshape(self, *shape):
        from lgattn.numerics import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from lgattn.numerics import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        from lgattn.numerics import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from lgattn.numerics import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Append-only record of differentiable ops executed while active.

    Use as a context manager around a forward pass, then call
    :meth:`backward` on the scalar loss. Node inputs always precede the node
    itself, so walking the list in reverse is a valid topological order.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tapes.remove(self)

    def record(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, backward) -> None:
        output._tape_id = len(self.nodes)
        self.nodes.append(Node(op, inputs, output, backward))

    def backward(self, loss: Tensor, keep_intermediate: bool = False) -> dict[int, np.ndarray]:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf that requires grad.

        Returns gradients keyed by ``id(tensor)``: every tensor reached when
        ``keep_intermediate`` is set, otherwise only the leaves (intermediate
        buffers are released as soon as they have been propagated).
        """
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.get(id(node.output)) if keep_intermediate else grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.shape:
                    raise ShapeError(f"{node.op}: gradient shape {gi.shape} != value shape {t.shape}")
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if t._tape_id is None:
                    leaves[key] = t
        for key, t in leaves.items():
            g = grads[key].astype(t.dtype, copy=False)
            t.grad = g if t.grad is None else t.grad + g
        return grads


def current_tape() -> Tape | None:
    return _active_tapes[-1] if _active_tapes else None


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording on all active tapes."""
    saved = list(_active_tapes)
    _active_tapes.clear()
    try:
        yield
    finally:
        _active_tapes.extend(saved)


def make_result(op: str, data: np.ndarray, inputs: tuple, backward) -> Tensor:
    """Wrap ``data`` and record it on the active tape if any input needs grad."""
    out = Tensor(np.asarray(data))
    tape = current_tape()
    if tape is not None:
        tensors = tuple(x for x in inputs if isinstance(x, Tensor))
        if any(t.requires_grad for t in tensors):
            out.requires_grad = True
            tape.record(op, inputs, out, backward)
    return out
