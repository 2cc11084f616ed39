"""Dense tensors, the recording tape and reverse-mode backpropagation.

Operations in :mod:`snider.autodiff.functional` append a record to the
innermost active :class:`Tape` whenever one of their inputs requires a
gradient. Outside a tape nothing is recorded, which is how inference runs.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

_DTYPES: list[np.dtype] = [np.dtype(np.float32)]
_TAPES: list["Tape"] = []


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


def default_dtype() -> np.dtype:
    return _DTYPES[-1]


@contextlib.contextmanager
def precision(dtype) -> Iterator[np.dtype]:
    """Temporarily switch the dtype used for newly created tensors.

    ``with precision(np.float64): ...`` is the 64-bit mode used by the
    gradient checks.
    """
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported precision {dt}")
    _DTYPES.append(dt)
    try:
        yield dt
    finally:
        _DTYPES.pop()


class Tensor:
    """An N-d real array with an optional gradient.

    ``data`` is a C-contiguous numpy array; its flat view is the row-major
    scalar sequence. ``grad`` has the same shape when populated.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_tape", "_index")

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None):
        arr = np.ascontiguousarray(data, dtype=dtype or default_dtype())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Tape | None = None
        self._index = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"


class Parameter(Tensor):
    """A trainable tensor carrying its own Adam moment buffers."""

    __slots__ = ("adam_m", "adam_v", "step_count")

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, name=name, dtype=dtype)
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.step_count = 0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class _Record:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn
    op: str


class Tape:
    """Ordered log of differentiable operations.

    Records are appended as operations execute, so the list is already a
    topological order and a single reverse sweep visits every node once.
    """

    def __init__(self) -> None:
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def record(self, op: str, output: Tensor, inputs: tuple[Tensor, ...], backward: BackwardFn) -> None:
        output._tape = self
        output._index = len(self.records)
        output.requires_grad = True
        self.records.append(_Record(inputs, output, backward, op))


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def make_result(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
    """Wrap ``data`` and record it on the active tape when needed."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out.name = ""
    out._tape = None
    out._index = -1
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, out, inputs, backward)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Leaves that the loss does not depend on keep their current ``grad``.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is not tape:
        raise ValueError("loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records[: loss._index + 1]):
        g_out = grads.pop(id(rec.output), None)
        if g_out is None:
            continue
        for inp, g in zip(rec.inputs, rec.backward(g_out)):
            if g is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
            if inp._tape is None:
                leaves[key] = inp
    for key, leaf in leaves.items():
        g = grads[key].astype(leaf.data.dtype, copy=False).reshape(leaf.shape)
        if leaf.grad is None:
            leaf.grad = g.copy()
        else:
            leaf.grad += g
