"""Tensor container, precision mode and the reverse-mode tape."""
from __future__ import annotations

import contextlib
import threading

import numpy as np


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


_DTYPES = {"float32": np.float32, "float64": np.float64}
_state = threading.local()


def get_dtype():
    return getattr(_state, "dtype", np.float32)


def set_precision(name: str) -> None:
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _state.dtype = _DTYPES[name]


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch the scalar precision used for new tensors."""
    previous = get_dtype()
    set_precision(name)
    try:
        yield
    finally:
        _state.dtype = previous


class Tensor:
    """Dense array plus gradient bookkeeping.

    ``data`` is a numpy array in the active precision; ``grad`` is filled by
    :meth:`Tape.backward` for leaves with ``requires_grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=get_dtype())
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        """Adopt ``arr`` as-is, keeping its dtype (used by primitives)."""
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor.wrap(self.data)

    def copy(self) -> "Tensor":
        t = Tensor.wrap(self.data.copy(), self.requires_grad)
        t.name = self.name
        return t

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    # arithmetic sugar, implemented in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)


class Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


# op name -> multiplier applied to that op's input gradients (fault injection)
_faults: dict[str, float] = {}


@contextlib.contextmanager
def inject_backward_fault(op: str, factor: float = 1.5):
    """Scale every input gradient produced by ``op``'s backward; for testing checkers."""
    _faults[op] = factor
    try:
        yield
    finally:
        _faults.pop(op, None)


class Tape:
    """Ordered record of primitive applications.

    Used as a context manager; while active, primitives whose inputs require
    gradients append a node. ``backward`` walks the nodes in exact reverse
    recording order and accumulates into leaf ``grad`` arrays.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._produced: set[int] = set()

    def __enter__(self):
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def record(self, op, inputs, output, backward):
        self.nodes.append(Node(op, inputs, output, backward))
        self._produced.add(id(output))

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        if id(loss) not in self._produced:
            raise ValueError("loss was not produced on this tape")
        if grad is None:
            if loss.data.size != 1:
                raise ShapeError(f"backward needs an explicit gradient for shape {loss.shape}")
            grad = np.ones_like(loss.data)
        pending: dict[int, np.ndarray] = {id(loss): grad}
        for node in reversed(self.nodes):
            g = pending.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            factor = _faults.get(node.op)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if factor is not None:
                    gi = gi * factor
                if id(inp) in self._produced:
                    prev = pending.get(id(inp))
                    pending[id(inp)] = gi if prev is None else prev + gi
                else:
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi


def _tape_stack() -> list[Tape]:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_tape():
    """Suspend recording, e.g. for evaluation inside a training step."""
    stack = _tape_stack()
    saved = stack[:]
    stack.clear()
    try:
        yield
    finally:
        stack.extend(saved)
