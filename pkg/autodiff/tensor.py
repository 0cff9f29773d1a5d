"""
Dense float64 tensors with tape-based reverse-mode differentiation.

The engine covers exactly what the diffusion objectives need: elementwise
arithmetic with scalar broadcasting, matrix products, the sigmoid family,
reductions and concatenation. Operations are recorded on the innermost active
``GradientTape`` of the calling thread whenever one of their inputs requires a
gradient; ``GradientTape.backward`` replays the record in reverse.
"""

import itertools
import threading
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from .exceptions import NonFiniteError, ShapeError, TapeError

ArrayLike = Union['Tensor', np.ndarray, float, int, Sequence]

_node_ids = itertools.count(1)
_state = threading.local()


def _tape_stack() -> List['GradientTape']:
    stack = getattr(_state, 'tapes', None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def _check_finite(values: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"{where} produced non-finite values")


class Tensor:
    """An immutable n-dimensional float64 array with an autodiff identity.

    Leaves created with ``requires_grad=True`` are the trainable parameters;
    only they may be overwritten in place, through ``assign``.
    """

    __slots__ = ('_values', 'requires_grad', 'node_id')
    __array_priority__ = 100

    def __init__(self, values: ArrayLike, requires_grad: bool = False):
        if isinstance(values, Tensor):
            values = values.values
        array = np.array(values, dtype=np.float64)
        if array.size == 0:
            raise ShapeError("tensors must have positive extents")
        _check_finite(array, 'tensor construction')
        array.setflags(write=False)
        self._values = array
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)

    @classmethod
    def _wrap(cls, array: np.ndarray, requires_grad: bool) -> 'Tensor':
        tensor = cls.__new__(cls)
        array = np.asarray(array, dtype=np.float64)
        array.setflags(write=False)
        tensor._values = array
        tensor.requires_grad = requires_grad
        tensor.node_id = next(_node_ids)
        return tensor

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def shape(self) -> Tuple[int, ...]:
        return self._values.shape

    @property
    def size(self) -> int:
        return self._values.size

    @property
    def ndim(self) -> int:
        return self._values.ndim

    def numpy(self) -> np.ndarray:
        return self._values.copy()

    def item(self) -> float:
        if self._values.size != 1:
            raise ShapeError(f"item() needs a single value, got shape {self.shape}")
        return float(self._values.reshape(()))

    def assign(self, values: ArrayLike) -> None:
        """Overwrite a trainable leaf (optimizer updates, loading)."""
        if not self.requires_grad:
            raise TapeError("only grad-requiring leaves can be reassigned")
        array = np.array(values, dtype=np.float64)
        if array.shape != self.shape:
            raise ShapeError(f"cannot assign shape {array.shape} to {self.shape}")
        _check_finite(array, 'assign')
        array.setflags(write=False)
        self._values = array

    def __repr__(self):
        flag = ', requires_grad=True' if self.requires_grad else ''
        return f"Tensor(shape={self.shape}{flag}, node_id={self.node_id})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return negate(self)


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass
class _Record:
    op: str
    output_id: int
    parents: Tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class GradientTape:
    """Ordered record of primitive operations for one backward pass.

    Usage::

        with GradientTape() as tape:
            loss = mean(square(model_output - target))
        grads = tape.backward(loss)
        grads[param.node_id]
    """

    def __init__(self):
        self._records: List[_Record] = []
        self._outputs: Dict[int, Tuple[int, ...]] = {}
        self._watched: Dict[int, Tensor] = {}
        self._consumed = False

    def __enter__(self) -> 'GradientTape':
        if self._consumed:
            raise TapeError("tape already consumed")
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    @property
    def operations(self) -> List[str]:
        return [record.op for record in self._records]

    @property
    def consumed(self) -> bool:
        return self._consumed

    def watch(self, *tensors: Tensor) -> None:
        """Report gradients for these leaves even if the loss never uses them."""
        for tensor in tensors:
            if tensor.requires_grad:
                self._watched[tensor.node_id] = tensor

    def _push(self, op: str, output: Tensor, parents, vjp) -> None:
        if self._consumed:
            raise TapeError("tape already consumed")
        self._records.append(_Record(op, output.node_id, tuple(parents), vjp))
        self._outputs[output.node_id] = output.shape

    def backward(self, loss: Tensor) -> Dict[int, Tensor]:
        """Return d(loss)/d(leaf) for every grad-requiring leaf on this tape.

        Leaves the loss does not depend on get zero gradients. The tape can be
        replayed only once.
        """
        if self._consumed:
            raise TapeError("tape already consumed")
        if loss.shape != ():
            raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")

        leaves: Dict[int, Tensor] = dict(self._watched)
        for record in self._records:
            for parent in record.parents:
                if parent.requires_grad and parent.node_id not in self._outputs:
                    leaves.setdefault(parent.node_id, parent)

        grads: Dict[int, np.ndarray] = {}
        if loss.requires_grad:
            if loss.node_id not in self._outputs and loss.node_id not in leaves:
                raise TapeError("loss was not recorded on this tape")
            grads[loss.node_id] = np.ones(())
            for record in reversed(self._records):
                upstream = grads.get(record.output_id)
                if upstream is None:
                    continue
                for parent, grad in zip(record.parents, record.vjp(upstream)):
                    if grad is None or not parent.requires_grad:
                        continue
                    if parent.node_id in grads:
                        grads[parent.node_id] = grads[parent.node_id] + grad
                    else:
                        grads[parent.node_id] = grad
        self._consumed = True

        return {
            node_id: Tensor._wrap(
                grads[node_id] if node_id in grads else np.zeros(leaf.shape), False
            )
            for node_id, leaf in leaves.items()
        }


def _emit(op: str, values: np.ndarray, parents: Sequence[Tensor], vjp) -> Tensor:
    _check_finite(values, op)
    requires_grad = any(parent.requires_grad for parent in parents)
    out = Tensor._wrap(values, requires_grad)
    if requires_grad:
        stack = _tape_stack()
        if stack:
            stack[-1]._push(op, out, parents, vjp)
    return out


def _elementwise_shapes(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform")


def _reduce_to(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return np.full(shape, grad.sum()) if shape else grad.sum()


def _scalar_view(t: Tensor, other: Tensor) -> np.ndarray:
    # size-1 operands broadcast against the other operand's full shape
    if t.size == 1 and t.shape != other.shape:
        return t.values.reshape(())
    return t.values


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _elementwise_shapes('add', a, b)

    def vjp(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _emit('add', _scalar_view(a, b) + _scalar_view(b, a), (a, b), vjp)


def subtract(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _elementwise_shapes('subtract', a, b)

    def vjp(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _emit('subtract', _scalar_view(a, b) - _scalar_view(b, a), (a, b), vjp)


def multiply(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _elementwise_shapes('multiply', a, b)
    av, bv = _scalar_view(a, b), _scalar_view(b, a)

    def vjp(g):
        return _reduce_to(g * bv, a.shape), _reduce_to(g * av, b.shape)

    return _emit('multiply', av * bv, (a, b), vjp)


def negate(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _emit('negate', -a.values, (a,), lambda g: (-g,))


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError(f"matmul needs 1-D or 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    av, bv = a.values, b.values

    def vjp(g):
        if av.ndim == 2 and bv.ndim == 2:
            return g @ bv.T, av.T @ g
        if av.ndim == 2:
            return np.outer(g, bv), av.T @ g
        if bv.ndim == 2:
            return bv @ g, np.outer(av, g)
        return g * bv, g * av

    return _emit('matmul', av @ bv, (a, b), vjp)


def sigmoid(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    s = special.expit(a.values)
    return _emit('sigmoid', s, (a,), lambda g: (g * s * (1.0 - s),))


def log_sigmoid(a: ArrayLike) -> Tensor:
    """log(1 / (1 + exp(-u))) evaluated as -softplus(-u) without overflow."""
    a = as_tensor(a)
    return _emit(
        'log_sigmoid',
        special.log_expit(a.values),
        (a,),
        lambda g: (g * special.expit(-a.values),),
    )


def square(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _emit('square', a.values * a.values, (a,), lambda g: (2.0 * a.values * g,))


def sum(a: ArrayLike, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    """Sum all entries (scalar result) or along ``axis`` keeping the axis."""
    a = as_tensor(a)
    if axis is None:
        values = np.sum(a.values)
    else:
        if not -a.ndim <= axis < a.ndim:
            raise ShapeError(f"sum: axis {axis} out of range for shape {a.shape}")
        values = np.sum(a.values, axis=axis, keepdims=True)
    return _emit('sum', values, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a: ArrayLike, axis: Optional[int] = None) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return multiply(sum(a, axis=axis), 1.0 / count)


def concatenate(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise ShapeError("concatenate needs at least one tensor")
    ndim = parts[0].ndim
    if ndim == 0:
        raise ShapeError("concatenate needs tensors of rank 1 or more")
    for part in parts:
        if part.ndim != ndim:
            raise ShapeError("concatenate: operands differ in rank")
        rest = [n for i, n in enumerate(part.shape) if i != axis % ndim]
        if rest != [n for i, n in enumerate(parts[0].shape) if i != axis % ndim]:
            raise ShapeError(f"concatenate: shapes {[p.shape for p in parts]} do not conform")
    values = np.concatenate([part.values for part in parts], axis=axis)
    splits = np.cumsum([part.shape[axis] for part in parts])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit('concatenate', values, parts, vjp)


def silu(a: ArrayLike) -> Tensor:
    """Smooth activation x * sigmoid(x), composed from primitives."""
    a = as_tensor(a)
    return multiply(a, sigmoid(a))
