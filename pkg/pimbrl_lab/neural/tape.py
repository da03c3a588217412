"""
Reverse-mode gradient tape over numpy arrays.

A ``Tensor`` wraps an array. While a ``Tape`` is active (``with Tape() as tape``),
every primitive applied to a tensor that requires gradients appends one record
(output, parents, local backward rule) to the tape. ``backward`` replays the
records in reverse creation order, which is a valid topological order, and
returns gradients for the watched parameter tensors.

Outside an active tape the same primitives only compute values, so the network
code has a single forward path for training and inference.
"""

import contextvars
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from pimbrl_lab.errors import UsageError

ArrayLike = Union[np.ndarray, float, int]
BackwardRule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_active_tape: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "active_tape", default=None
)


@dataclass
class _Record:
    output: "Tensor"
    parents: Tuple["Tensor", ...]
    rule: BackwardRule


class Tape:
    """Records primitive operations of one forward pass."""

    def __init__(self) -> None:
        self.records: List[_Record] = []
        self._token: Optional[contextvars.Token] = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc: Any) -> None:
        if self._token is not None:
            _active_tape.reset(self._token)
            self._token = None

    def watch(self, arrays: Mapping[str, np.ndarray]) -> Dict[str, "Tensor"]:
        """Wrap named arrays as gradient-tracked leaves."""
        return {name: Tensor(value, requires_grad=True, name=name) for name, value in arrays.items()}


class Tensor:
    """An array node of the computation graph."""

    # makes numpy defer `ndarray <op> Tensor` to the reflected Tensor operators
    __array_ufunc__ = None

    def __init__(self, value: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.value)

    # arithmetic

    def __add__(self, other: Any) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Any) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Any) -> "Tensor":
        return add(self, neg(other))

    def __rsub__(self, other: Any) -> "Tensor":
        return add(other, neg(self))

    def __mul__(self, other: Any) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Any) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: Any) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: Any) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __pow__(self, exponent: float) -> "Tensor":
        return power(self, exponent)

    def __matmul__(self, other: Any) -> "Tensor":
        return matmul(self, other)

    def __rmatmul__(self, other: Any) -> "Tensor":
        return matmul(other, self)

    def __getitem__(self, index: Any) -> "Tensor":
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x: Any) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def value_of(x: Any) -> np.ndarray:
    """Plain array behind a tensor (or the argument itself)."""
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _emit(value: np.ndarray, parents: Sequence[Any], rule: BackwardRule) -> Tensor:
    tensors = tuple(as_tensor(p) for p in parents)
    needs_grad = any(t.requires_grad for t in tensors)
    out = Tensor(value, requires_grad=needs_grad)
    tape = _active_tape.get()
    if needs_grad and tape is not None:
        tape.records.append(_Record(out, tensors, rule))
    return out


def _generic(x: Any) -> bool:
    return not isinstance(x, Tensor)


# primitives


def add(a: Any, b: Any) -> Tensor:
    av, bv = value_of(a), value_of(b)
    return _emit(av + bv, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def neg(a: Any) -> Any:
    if _generic(a):
        return -np.asarray(a, dtype=np.float64)
    return _emit(-a.value, (a,), lambda g: (-g,))


def mul(a: Any, b: Any) -> Tensor:
    av, bv = value_of(a), value_of(b)
    return _emit(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def div(a: Any, b: Any) -> Tensor:
    av, bv = value_of(a), value_of(b)
    return _emit(
        av / bv,
        (a, b),
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * av / bv**2, bv.shape)),
    )


def power(a: Tensor, exponent: float) -> Tensor:
    av = value_of(a)
    return _emit(av**exponent, (a,), lambda g: (g * exponent * av ** (exponent - 1),))


def matmul(a: Any, b: Any) -> Tensor:
    av, bv = value_of(a), value_of(b)

    def rule(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        if bv.ndim == 1:
            ga = np.multiply.outer(g, bv)
            gb = np.tensordot(g, av, axes=(tuple(range(g.ndim)), tuple(range(av.ndim - 1))))
            return ga, gb
        if av.ndim == 1:
            return g @ np.swapaxes(bv, -1, -2), np.multiply.outer(av, g)
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _emit(av @ bv, (a, b), rule)


def _unary(fn: Callable[[np.ndarray], np.ndarray], derivative: Callable[[np.ndarray, np.ndarray], np.ndarray]):
    def op(a: Any) -> Any:
        if _generic(a):
            return fn(np.asarray(a, dtype=np.float64))
        out_value = fn(a.value)
        return _emit(out_value, (a,), lambda g: (g * derivative(a.value, out_value),))

    return op


tanh = _unary(np.tanh, lambda x, y: 1.0 - y**2)
sigmoid = _unary(lambda x: 0.5 * (1.0 + np.tanh(0.5 * x)), lambda x, y: y * (1.0 - y))
relu = _unary(lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(np.float64))
sin = _unary(np.sin, lambda x, y: np.cos(x))
cos = _unary(np.cos, lambda x, y: -np.sin(x))
exp = _unary(np.exp, lambda x, y: y)
sqrt = _unary(np.sqrt, lambda x, y: 0.5 / y)
square = _unary(np.square, lambda x, y: 2.0 * x)
identity = _unary(lambda x: x, lambda x, y: np.ones_like(x))


def sum_(a: Any, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> Any:
    if _generic(a):
        return np.sum(a, axis=axis, keepdims=keepdims)
    av = a.value

    def rule(g: np.ndarray) -> Tuple[np.ndarray]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape).copy(),)

    return _emit(np.sum(av, axis=axis, keepdims=keepdims), (a,), rule)


def mean(a: Any, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> Any:
    shape = np.shape(value_of(a))
    axes = range(len(shape)) if axis is None else ((axis,) if isinstance(axis, int) else axis)
    count = int(np.prod([shape[ax] for ax in axes]))
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a: Any, shape: Tuple[int, ...]) -> Any:
    if _generic(a):
        return np.reshape(a, shape)
    original = a.value.shape
    return _emit(a.value.reshape(shape), (a,), lambda g: (g.reshape(original),))


def transpose(a: Any, axes: Optional[Tuple[int, ...]] = None) -> Any:
    if _generic(a):
        return np.transpose(a, axes)
    inverse = None if axes is None else tuple(np.argsort(axes))
    return _emit(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inverse),))


def _is_basic_index(index: Any) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice, type(None))) or p is Ellipsis for p in parts)


def getitem(a: Tensor, index: Any) -> Tensor:
    av = a.value
    basic = _is_basic_index(index)

    def rule(g: np.ndarray) -> Tuple[np.ndarray]:
        grad = np.zeros_like(av)
        if basic:
            grad[index] += g
        else:
            np.add.at(grad, index, g)
        return (grad,)

    return _emit(av[index], (a,), rule)


def take(a: Any, indices: np.ndarray, axis: int) -> Any:
    """Gather along ``axis``; repeated indices accumulate their gradients."""
    if _generic(a):
        return np.take(a, indices, axis=axis)
    av = a.value
    axis = axis % av.ndim

    def rule(g: np.ndarray) -> Tuple[np.ndarray]:
        grad = np.zeros_like(av)
        moved = np.moveaxis(grad, axis, 0)
        g_moved = np.moveaxis(g, list(range(axis, axis + indices.ndim)), list(range(indices.ndim)))
        np.add.at(moved, indices, g_moved)
        return (grad,)

    return _emit(np.take(av, indices, axis=axis), (a,), rule)


def concat(parts: Sequence[Any], axis: int = -1) -> Any:
    if all(_generic(p) for p in parts):
        return np.concatenate([np.asarray(p, dtype=np.float64) for p in parts], axis=axis)
    values = [value_of(p) for p in parts]
    sizes = np.cumsum([v.shape[axis] for v in values])[:-1]
    return _emit(
        np.concatenate(values, axis=axis),
        tuple(parts),
        lambda g: tuple(np.split(g, sizes, axis=axis)),
    )


def stack(parts: Sequence[Any], axis: int = -1) -> Any:
    if all(_generic(p) for p in parts):
        return np.stack([np.asarray(p, dtype=np.float64) for p in parts], axis=axis)
    values = [value_of(p) for p in parts]
    out = np.stack(values, axis=axis)
    stack_axis = axis % out.ndim

    def rule(g: np.ndarray) -> Tuple[np.ndarray, ...]:
        return tuple(np.take(g, i, axis=stack_axis) for i in range(len(values)))

    return _emit(out, tuple(parts), rule)


def l2_norm(a: Any, axis: int = -1) -> Any:
    """Euclidean norm along ``axis``; differentiable at zero through a 1e-30 floor."""
    return sqrt(sum_(square(a), axis=axis) + 1e-30)


# gradient replay


def backward(
    tape: Tape,
    output: Tensor,
    wrt: Mapping[str, Tensor],
    output_grad: Optional[np.ndarray] = None,
) -> Dict[str, np.ndarray]:
    """
    Replay a tape backwards from ``output``.

    Args:
        tape: The tape that recorded the forward pass
        output: The tensor to differentiate (scalar unless ``output_grad`` is given)
        wrt: Named leaves to return gradients for (usually from ``Tape.watch``)
        output_grad: Seed gradient; defaults to 1 for a scalar output

    Returns:
        Gradient arrays keyed like ``wrt``; leaves off the path get exact zeros

    Raises:
        UsageError: If the tape is empty or never produced ``output``
    """
    if not tape.records:
        raise UsageError("backward called on a tape with no recorded forward pass")
    if not any(record.output is output for record in tape.records):
        raise UsageError("output was not produced on this tape")

    if output_grad is None:
        if output.value.size != 1:
            raise UsageError("output_grad is required for non-scalar outputs")
        output_grad = np.ones_like(output.value)

    grads: Dict[int, np.ndarray] = {id(output): np.asarray(output_grad, dtype=np.float64)}
    for record in reversed(tape.records):
        g = grads.pop(id(record.output), None)
        if g is None:
            continue
        for parent, parent_grad in zip(record.parents, record.rule(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + parent_grad if key in grads else parent_grad

    return {
        name: grads.get(id(leaf), np.zeros_like(leaf.value)).reshape(leaf.value.shape)
        for name, leaf in wrt.items()
    }
