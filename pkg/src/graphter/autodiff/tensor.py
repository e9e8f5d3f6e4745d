"""Dense tensors and the operation tape used for reverse-mode differentiation.

Every differentiable op appends a :class:`Record` to the active :class:`Tape`
when at least one of its inputs requires a gradient. :func:`backward` walks the
tape in reverse, visiting each record once, then resets the tape.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""


class TapeError(RuntimeError):
    """Raised when backward is called on something not recorded on a live tape."""


class Tensor:
    """A numpy array plus gradient bookkeeping.

    ``data`` keeps whatever float dtype it was created with; ops preserve it,
    so a model built in float64 stays float64 end to end.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_record")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._record: Optional[Record] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._record is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar; the op implementations live in ops.py
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.subtract(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.subtract(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.multiply(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.multiply(other, self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __neg__(self):
        from . import ops
        return ops.multiply(self, -1.0)


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass(eq=False)
class Record:
    op: str
    inputs: tuple
    output: Tensor
    backward: BackwardFn
    tape: "Tape"
    generation: int


@dataclass(eq=False)
class Tape:
    """Ordered log of executed ops for one forward pass."""

    records: list = field(default_factory=list)
    generation: int = 0

    def append(self, record: Record) -> None:
        self.records.append(record)

    def reset(self) -> None:
        for rec in self.records:
            rec.output._record = None
        self.records = []
        self.generation += 1

    def __len__(self) -> int:
        return len(self.records)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()


_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = [Tape()]
        _local.grad_enabled = True
    return _local.tapes


def current_tape() -> Tape:
    return _stack()[-1]


def grad_enabled() -> bool:
    _stack()
    return _local.grad_enabled


@contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording them."""
    _stack()
    prev = _local.grad_enabled
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def record_op(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wrap ``out_data`` in a Tensor and log the op if any input needs a gradient.

    ``backward_fn`` maps the output gradient to one gradient (or None) per input.
    """
    out = Tensor(out_data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        tape = current_tape()
        out.requires_grad = True
        rec = Record(op, tuple(inputs), out, backward_fn, tape, tape.generation)
        out._record = rec
        tape.append(rec)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires grad and feeds ``loss``.

    Leaf gradients accumulate across calls; clear them with ``zero_grad``.
    The tape that recorded ``loss`` is reset afterwards.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    rec = loss._record
    if rec is None or rec.generation != rec.tape.generation:
        raise TapeError("backward: loss is not on a live tape (already backpropagated, or no recorded ops)")
    tape = rec.tape
    stop = _index_of(tape, rec)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for r in reversed(tape.records[: stop + 1]):
        g = grads.pop(id(r.output), None)
        if g is None:
            continue
        in_grads = r.backward(g)
        for inp, ig in zip(r.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if ig.shape != inp.shape:
                raise ShapeError(f"{r.op} backward: gradient shape {ig.shape} != input shape {inp.shape}")
            if inp._record is None:
                ig = ig.astype(inp.dtype, copy=False)
                inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
            else:
                key = id(inp)
                grads[key] = ig if key not in grads else grads[key] + ig
    tape.reset()


def _index_of(tape: Tape, rec: Record) -> int:
    for i in range(len(tape.records) - 1, -1, -1):
        if tape.records[i] is rec:
            return i
    raise TapeError("backward: loss record missing from its tape")
