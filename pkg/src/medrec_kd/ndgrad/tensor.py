"""Dense float64 tensors and the tape that records operations on them."""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """A float64 array that optionally participates in gradient recording.

    Leaves created with ``requires_grad=True`` are trainable parameters.
    Tensors produced by operations while a :class:`Tape` is active carry a
    reference to their parents and a backward function.
    """

    __slots__ = ("value", "requires_grad", "name", "parents", "backward_fn", "__weakref__")

    def __init__(self, value, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(value, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite value in tensor {name or ''}".strip())
        self.value = arr
        self.requires_grad = requires_grad
        self.name = name
        self.parents: tuple = ()
        self.backward_fn: Optional[BackwardFn] = None

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return self.backward_fn is None

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.value.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; the implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        if isinstance(other, (int, float)):
            return ops.scale(self, float(other))
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Records operations in execution order while active.

    Use as a context manager; operations executed outside any tape produce
    plain values with no graph attached (evaluation mode).
    """

    _stack: list = []

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._ids: set[int] = set()

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc):
        Tape._stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._ids

    def record(self, node: Tensor) -> None:
        self.nodes.append(node)
        self._ids.add(id(node))

    @classmethod
    def current(cls) -> Optional["Tape"]:
        return cls._stack[-1] if cls._stack else None


def make_node(value: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn,
              op: str = "") -> Tensor:
    # a finite sum means finite entries; the full scan only runs otherwise
    if not math.isfinite(np.add.reduce(value, None)) and not np.isfinite(value).all():
        raise NonFiniteError(f"{op or 'operation'} produced a non-finite value")
    out = Tensor.__new__(Tensor)
    out.value = value
    out.name = None
    out.requires_grad = False
    out.parents = ()
    out.backward_fn = None
    tape = Tape.current()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        tape.record(out)
    return out


def backward(tape: Tape, loss: Tensor, leaves: Optional[Iterable[Tensor]] = None) -> dict:
    """Reverse-mode sweep from a scalar ``loss``.

    Returns a dict mapping each leaf tensor to d loss / d leaf. Leaves named
    in ``leaves`` but not reached by the sweep get zero gradients.
    """
    if loss.value.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    reached: dict[int, Tensor] = {}
    if loss.is_leaf:
        if not loss.requires_grad:
            raise TapeError("loss is not on the tape")
        reached[id(loss)] = loss
        grads[id(loss)] = np.ones_like(loss.value)
    else:
        if loss not in tape:
            raise TapeError("loss is not on the tape")
        grads[id(loss)] = np.ones_like(loss.value)
        for node in reversed(tape.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if parent.is_leaf:
                    reached[key] = parent
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg
    out = {reached[k]: grads[k] for k in reached}
    if leaves is not None:
        for leaf in leaves:
            if leaf not in out:
                out[leaf] = np.zeros_like(leaf.value)
    return out
