"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable primitive records a :class:`Node` on the active
:class:`Tape` when at least one of its inputs requires a gradient.  The tape
is append-only during the forward pass, so its order is already a valid
topological order; :func:`backward` walks it once in reverse.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .errors import ContractViolation, InvalidShapeError

_default_dtype = np.dtype(np.float32)
_grad_enabled = True


def default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    """Select the floating precision used for new tensors and parameters."""
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported precision {dtype}")
    _default_dtype = dtype


@contextlib.contextmanager
def wide_precision() -> Iterator[None]:
    """Temporarily switch to float64, the mode used for gradient checking."""
    previous = _default_dtype
    set_default_dtype(np.float64)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def grad_enabled() -> bool:
    return _grad_enabled


class Node:
    """One recorded primitive: inputs, output and the vector-Jacobian product."""

    __slots__ = ("op", "inputs", "output", "vjp", "visits")

    def __init__(self, op: str, inputs: Sequence["Tensor"], output: "Tensor", vjp: Callable):
        self.op = op
        self.inputs = tuple(inputs)
        self.output = output
        self.vjp = vjp
        self.visits = 0

    def __repr__(self) -> str:
        return f"Node({self.op}, out={self.output.shape})"


class Tape:
    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def record(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def clear(self) -> None:
        for node in self.nodes:
            node.output.node = None
            node.output.requires_grad = False
        self.nodes = []

    def __len__(self) -> int:
        return len(self.nodes)


_tape = Tape()


def get_tape() -> Tape:
    return _tape


class Tensor:
    """N-dimensional array with optional gradient buffer and tape linkage."""

    __slots__ = ("data", "grad", "requires_grad", "node")
    __array_ufunc__ = None  # make numpy defer to the reflected operators below

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_default_dtype)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.node: Optional[Node] = None

    # -- introspection -------------------------------------------------
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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- arithmetic ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def mean(self) -> "Tensor":
        return tensor_mean(self)


class Parameter(Tensor):
    """Trainable tensor owned by a module; ``name`` is filled in by the owner."""

    __slots__ = ("name", "trainable")

    def __init__(self, data, name: str = "", trainable: bool = True):
        super().__init__(np.array(data, dtype=_default_dtype), requires_grad=trainable)
        self.name = name
        self.trainable = trainable

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else _default_dtype
    return Tensor(np.asarray(x, dtype=dtype))


def make_result(op: str, data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap ``data`` as an op output, recording a node when gradients are needed.

    ``vjp(grad_out)`` must return one gradient (or None) per input.
    """
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, out, vjp)
        _tape.record(out.node)
    return out


def backward(loss: Tensor, retain_tape: bool = False) -> None:
    """Populate ``.grad`` of every leaf that ``loss`` depends on.

    Gradients accumulate into existing buffers; zero them between steps.
    The tape is consumed unless ``retain_tape`` is set.
    """
    if loss.size != 1:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractViolation("loss does not depend on any tensor requiring grad")
    if loss.node is None:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
        return

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_tape.nodes):
        node.visits += 1
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                prev = pending.get(key)
                pending[key] = gi if prev is None else prev + gi
    if not retain_tape:
        _tape.clear()


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise InvalidShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc


def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return make_result(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return make_result(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_broadcast(a, b)
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result("mul", ad * bd, (a, b), vjp)


def tensor_sum(a: Tensor) -> Tensor:
    shape = a.shape
    return make_result(
        "sum", np.asarray(a.data.sum(), dtype=a.dtype), (a,),
        lambda g: (np.broadcast_to(g, shape).astype(g.dtype),),
    )


def tensor_mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return make_result(
        "mean", np.asarray(a.data.mean(), dtype=a.dtype), (a,),
        lambda g: (np.full(shape, g / n, dtype=g.dtype),),
    )


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.shape
    return make_result("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))
