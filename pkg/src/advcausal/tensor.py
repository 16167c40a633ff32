"""Dense f64 tensors with tape-based reverse-mode differentiation.

Operations are recorded on the innermost active :class:`Tape` whenever at
least one input requires a gradient. Outside a tape every primitive is a
plain forward computation, which is what inference and attack bookkeeping
use.

    >>> w = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_(mul(w, w))
    >>> tape.backward(loss)[id(w)]
    array([2., 4., 6.])
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericalError

_local = threading.local()


def _stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def active_tape() -> "Tape | None":
    stack = _stack()
    return stack[-1] if stack else None


class Tensor:
    """Immutable f64 array plus a gradient slot.

    ``data`` is marked read-only; parameter updates swap in a new array via
    :meth:`assign` instead of writing in place.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # op outputs own their array already; skip the defensive copy
        out = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericalError("non-finite value in forward pass")
        arr.flags.writeable = False
        out.data = arr
        out.requires_grad = False
        out.grad = None
        out._tape = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def item(self) -> float:
        return float(self.data)

    def assign(self, new_data) -> None:
        """Replace the payload (parameter-update path only)."""
        arr = np.array(new_data, dtype=np.float64)
        if arr.shape != self.data.shape:
            raise DimensionError(f"assign: shape {arr.shape} does not match {self.data.shape}")
        arr.flags.writeable = False
        self.data = arr

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Record:
    __slots__ = ("name", "inputs", "output", "backward")

    def __init__(self, name, inputs, output, backward):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of primitive applications for one forward pass."""

    def __init__(self):
        self.records: list[_Record] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse of nested contexts
            stack.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def _record(self, name, inputs, output, backward) -> None:
        output.requires_grad = True
        output._tape = self
        self.records.append(_Record(name, inputs, output, backward))

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Propagate d(loss)/d(.) to every differentiable tensor reachable from ``loss``.

        Returns a table keyed by ``id(tensor)``. Leaf tensors also get their
        ``.grad`` attribute set. The tape is spent afterwards.
        """
        if self._consumed:
            raise ContractError("backward: tape already consumed")
        if loss.size != 1:
            raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
        if loss._tape is not self:
            raise ContractError("backward: loss was not produced on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = set()
        for rec in reversed(self.records):
            produced.add(id(rec.output))
            g_out = grads.get(id(rec.output))
            if g_out is None:
                continue
            in_grads = rec.backward(g_out)
            for inp, g in zip(rec.inputs, in_grads):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g

        leaves = {}
        for rec in self.records:
            for inp in rec.inputs:
                if inp.requires_grad and id(inp) not in produced:
                    leaves[id(inp)] = inp
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericalError("non-finite gradient in backward pass")
            leaf.grad = g
        self._consumed = True
        self.records = []
        return grads


def _emit(name: str, inputs: Sequence[Tensor], out_data: np.ndarray,
          backward: Callable[[np.ndarray], tuple]) -> Tensor:
    out = Tensor._wrap(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape._record(name, tuple(inputs), out, backward)
    return out


def _broadcast_ok(a: Tensor, b: Tensor, op: str) -> bool:
    """True when ``b`` is a bias broadcast over ``a``'s leading batch axis."""
    if a.shape == b.shape:
        return False
    if a.data.ndim >= 1 and b.shape == a.shape[1:]:
        return True
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        return g @ bd.T, ad.T @ g

    return _emit("matmul", (a, b), ad @ bd, back)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"transpose: expected 2-D, got shape {a.shape}")
    return _emit("transpose", (a,), a.data.T.copy(), lambda g: (g.T,))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    bias = _broadcast_ok(a, b, "add")

    def back(g):
        return g, (g.sum(axis=0) if bias else g)

    return _emit("add", (a, b), a.data + b.data, back)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    bias = _broadcast_ok(a, b, "sub")

    def back(g):
        return g, -(g.sum(axis=0) if bias else g)

    return _emit("sub", (a, b), a.data - b.data, back)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def mul(a, b) -> Tensor:
    """Elementwise product. ``b`` may be a Python scalar (constant scale)."""
    a = as_tensor(a)
    if np.isscalar(b):
        c = float(b)
        return _emit("scale", (a,), a.data * c, lambda g: (g * c,))
    b = as_tensor(b)
    bias = _broadcast_ok(a, b, "mul")
    ad, bd = a.data, b.data

    def back(g):
        gb = g * ad
        return g * bd, (gb.sum(axis=0) if bias else gb)

    return _emit("mul", (a, b), ad * bd, back)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _emit("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = as_tensor(a)
    if a.data.ndim == 0:
        raise DimensionError(f"softmax: needs a class axis, got shape {a.shape}")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", (a,), s, back)


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericalError("log: non-positive input")
    ad = a.data
    return _emit("log", (a,), np.log(ad), lambda g: (g / ad,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        e = np.exp(a.data)  # overflow surfaces as NumericalError below
    return _emit("exp", (a,), e, lambda g: (g * e,))


def sum_(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _emit("sum", (a,), np.asarray(a.data.sum(axis=axis)), back)


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis), 1.0 / n)


def max_(a, axis: int = -1) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the first maximiser."""
    a = as_tensor(a)
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _emit("max", (a,), out, back)


def sign(a) -> Tensor:
    """Elementwise sign with sign(0) = 0. Zero gradient almost everywhere."""
    a = as_tensor(a)
    return _emit("sign", (a,), np.sign(a.data), lambda g: (np.zeros_like(g),))


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    out = np.clip(ad, lo, hi)
    keep = np.ones(ad.shape, dtype=bool)
    if lo is not None:
        keep &= ad >= lo
    if hi is not None:
        keep &= ad <= hi
    return _emit("clamp", (a,), out, lambda g: (g * keep,))


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    return tape.backward(loss)
