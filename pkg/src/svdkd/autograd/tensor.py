"""Dense float32 tensors with define-by-run reverse-mode differentiation."""

from __future__ import annotations

import contextlib
import threading
from typing import Iterable, Optional, Sequence

import numpy as np

DTYPE = np.float32

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (teacher forwards, evaluation)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an operation's rules."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        shown = " vs ".join(str(tuple(s)) for s in shapes)
        msg = f"{op}: incompatible shapes {shown}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.op = op
        self.shapes = shapes


class Function:
    """A recorded operation node.

    Subclasses implement ``forward`` on raw arrays and ``backward`` which maps
    the output gradient to one gradient (or ``None``) per input.
    """

    name = "op"

    def __init__(self, *inputs: "Tensor"):
        self.inputs = inputs
        self.needs_grad = tuple(t.requires_grad for t in inputs)
        self.saved: tuple = ()

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: "Tensor", **kwargs) -> "Tensor":
        inputs = tuple(as_tensor(t) for t in inputs)
        fn = cls(*inputs)
        out = fn.forward(*(t.data for t in inputs), **kwargs)
        needs = grad_enabled() and any(t.requires_grad for t in inputs)
        result = Tensor(out, requires_grad=needs)
        if needs:
            result._ctx = fn
        return result


class Tensor:
    """Row-major float32 array that can take part in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_ctx", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._ctx: Optional[Function] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar, defined in ops to avoid a circular import
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def sum(self, axis=None):
        from . import ops
        return ops.sum(self, axis=axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological_order(root: Tensor) -> list:
    """Tensors reachable from ``root`` with every producer before its consumers."""
    order: list = []
    seen: set = set()
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
        if node._ctx is not None:
            for parent in node._ctx.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def _check_scalar(loss: Tensor) -> None:
    if loss.size != 1:
        raise ShapeError("backward", loss.shape, detail="loss must be a scalar")


def grad(loss: Tensor, wrt: Iterable[Tensor]) -> list:
    """Gradients of a scalar ``loss`` w.r.t. ``wrt`` without touching ``.grad``.

    Tensors that do not influence the loss get a zero array.
    """
    _check_scalar(loss)
    wrt = list(wrt)
    grads = _run_backward(loss)
    return [
        grads[id(t)] if id(t) in grads else np.zeros_like(t.data) for t in wrt
    ]


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable leaf and node."""
    _check_scalar(loss)
    grads = _run_backward(loss)
    for t in _topological_order(loss):
        g = grads.get(id(t))
        if g is None:
            g = np.zeros_like(t.data)
        t.grad = g if t.grad is None else t.grad + g
    if loss.grad is None:
        loss.grad = np.ones_like(loss.data)


def _run_backward(loss: Tensor) -> dict:
    grads: dict = {}
    if not loss.requires_grad:
        return grads
    grads[id(loss)] = np.ones_like(loss.data)
    for node in reversed(_topological_order(loss)):
        g = grads.get(id(node))
        fn = node._ctx
        if fn is None or g is None:
            continue
        in_grads = fn.backward(g)
        for parent, pg in zip(fn.inputs, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=DTYPE)
            if pg.shape != parent.shape:
                raise ShapeError(f"{fn.name} backward", pg.shape, parent.shape)
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return grads
