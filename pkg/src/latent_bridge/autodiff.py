"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations only record themselves when a :class:`Tape` is active on the
current thread::

    with Tape() as tape:
        loss = ops.mean(ops.square(x @ w))
    grads = tape.backward(loss)
    grads[w]                      # ndarray shaped like w

Outside a tape every op is a plain numpy evaluation, which is what the
evaluation code uses.  A tape is single use: ``backward`` frees it.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .errors import AxisOutOfRange, DetachedTensor, DomainError, NotScalar, ShapeMismatch

# Largest x with exp(x) finite in float64.
_EXP_LIMIT = 709.78

_local = threading.local()


def _active_tape() -> Optional["Tape"]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """A float64 ndarray plus an optional handle onto the tape that produced it."""

    __slots__ = ("data", "_tape", "_node_id", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data) -> None:
        arr = np.array(data, dtype=np.float64)
        if 0 in arr.shape:
            raise ShapeMismatch(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self._tape: Optional[Tape] = None
        self._node_id: Optional[int] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t._tape = None
        t._node_id = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def node_id(self) -> Optional[int]:
        """Node index on the tape this tensor was recorded on, if that tape is live."""
        if self._tape is not None and not self._tape.freed:
            return self._node_id
        return None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise NotScalar(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        return f"Tensor({self.data!r})"

    # Operator sugar; everything routes through the functions below.
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else shift(self, float(other))

    def __radd__(self, other):
        return shift(self, float(other))

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else shift(self, -float(other))

    def __rsub__(self, other):
        return shift(neg(self), float(other))

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor division is not supported; scale by a constant instead")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("inputs", "backward", "shape")

    def __init__(self, inputs: tuple, backward: Optional[Callable], shape: tuple) -> None:
        self.inputs = inputs
        self.backward = backward
        self.shape = shape


class GradientMap:
    """Gradients of one loss, keyed by tape node id.

    Tensors can be used as keys directly: ``grads[param]``.  Leaves that the
    loss never touched yield zeros through :meth:`get`.
    """

    def __init__(self, grads: dict, leaf_index: dict) -> None:
        self._grads = grads
        self._leaf_index = leaf_index

    def _key(self, key) -> int:
        if isinstance(key, Tensor):
            try:
                return self._leaf_index[id(key)]
            except KeyError:
                raise KeyError("tensor is not a leaf of this tape") from None
        return key

    def __getitem__(self, key) -> np.ndarray:
        return self._grads[self._key(key)]

    def __contains__(self, key) -> bool:
        try:
            return self._key(key) in self._grads
        except KeyError:
            return False

    def get(self, tensor: Tensor) -> np.ndarray:
        node = self._leaf_index.get(id(tensor))
        if node is None or node not in self._grads:
            return np.zeros_like(tensor.data)
        return self._grads[node]

    def __iter__(self) -> Iterator[int]:
        return iter(self._grads)

    def __len__(self) -> int:
        return len(self._grads)

    def items(self):
        return self._grads.items()


class Tape:
    """Ordered record of operations for a single forward/backward pass."""

    def __init__(self) -> None:
        self._nodes: list = []
        self._leaf_index: dict = {}
        self._leaf_refs: list = []
        self.freed = False

    def __enter__(self) -> "Tape":
        if self.freed:
            raise DetachedTensor("tape already consumed by backward()")
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self._nodes)

    def _node_of(self, t: Tensor) -> int:
        if t._tape is self:
            return t._node_id
        key = id(t)
        node = self._leaf_index.get(key)
        if node is None:
            node = len(self._nodes)
            self._nodes.append(_Node((), None, t.data.shape))
            self._leaf_index[key] = node
            self._leaf_refs.append(t)
        return node

    def record(self, value: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
        """Append an op; ``backward(g)`` returns one gradient (or None) per input."""
        ids = tuple(self._node_of(t) for t in inputs)
        out = Tensor._wrap(value)
        out._tape = self
        out._node_id = len(self._nodes)
        self._nodes.append(_Node(ids, backward, value.shape))
        return out

    def backward(self, loss: Tensor) -> GradientMap:
        """Reverse sweep from a scalar ``loss``; returns gradients of every leaf."""
        if self.freed or loss._tape is not self:
            raise DetachedTensor("loss is not recorded on this live tape")
        if loss.data.size != 1:
            raise NotScalar(f"backward() needs a scalar loss, got shape {loss.shape}")
        grads: list = [None] * len(self._nodes)
        grads[loss._node_id] = np.ones_like(loss.data)
        for idx in range(loss._node_id, -1, -1):
            g = grads[idx]
            node = self._nodes[idx]
            if g is None or node.backward is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None:
                    continue
                if grads[inp] is None:
                    grads[inp] = gi
                else:
                    grads[inp] = grads[inp] + gi
        leaf_grads = {}
        for node in self._leaf_index.values():
            g = grads[node]
            leaf_grads[node] = np.zeros(self._nodes[node].shape) if g is None else g
        result = GradientMap(leaf_grads, dict(self._leaf_index))
        self._free()
        return result

    def _free(self) -> None:
        self._nodes = []
        self._leaf_refs = []
        self.freed = True


def backward(loss: Tensor) -> GradientMap:
    """Differentiate ``loss`` on the tape it was recorded on."""
    if loss._tape is None:
        raise DetachedTensor("loss was computed outside any tape")
    return loss._tape.backward(loss)


def _emit(value: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    tape = _active_tape()
    if tape is None:
        return Tensor._wrap(value)
    return tape.record(value, inputs, backward)


# ---------------------------------------------------------------------------
# elementwise


def _check_binary(a: Tensor, b: Tensor, name: str) -> bool:
    """Return True when ``b`` is a trailing bias vector broadcast over ``a``."""
    if a.shape == b.shape:
        return False
    if b.ndim == 1 and a.ndim == 2 and a.shape[1] == b.shape[0]:
        return True
    raise ShapeMismatch(f"{name}: incompatible shapes {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    bias = _check_binary(a, b, "add")

    def bw(g):
        return g, (g.sum(axis=0) if bias else g)

    return _emit(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    bias = _check_binary(a, b, "sub")

    def bw(g):
        return g, -(g.sum(axis=0) if bias else g)

    return _emit(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    bias = _check_binary(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        gb = g * ad
        return g * bd, (gb.sum(axis=0) if bias else gb)

    return _emit(ad * bd, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _emit(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def shift(a: Tensor, c: float) -> Tensor:
    """Add a constant to every element."""
    return _emit(a.data + float(c), (a,), lambda g: (g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0  # subgradient 0 at exactly 0
    return _emit(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # exp of a non-positive argument only, so no overflow on either tail
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit(s, (a,), lambda g: (g * s * (1.0 - s),))


def exp(a: Tensor) -> Tensor:
    if np.any(a.data > _EXP_LIMIT):
        raise DomainError(f"exp overflow: input max {a.data.max():.6g} exceeds {_EXP_LIMIT}")
    e = np.exp(a.data)
    return _emit(e, (a,), lambda g: (g * e,))


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        raise DomainError(f"log requires strictly positive input, min is {x.min():.6g}")
    return _emit(np.log(x), (a,), lambda g: (g / x,))


def square(a: Tensor) -> Tensor:
    x = a.data
    return _emit(x * x, (a,), lambda g: (2.0 * g * x,))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "neg": neg,
    "relu": relu,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "square": square,
    "scale": scale,
}


def elementwise(op_kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name; ``b`` is the second operand, or the constant for ``scale``."""
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op_kind!r}") from None
    if op_kind in ("add", "sub", "mul", "scale"):
        if b is None:
            raise ValueError(f"{op_kind} needs a second operand")
        return fn(a, b)
    return fn(a)


# ---------------------------------------------------------------------------
# linear algebra, reductions, structure


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ bd.T, ad.T @ g

    return _emit(ad @ bd, (a, b), bw)


def _check_axis(a: Tensor, axis: Optional[int]) -> None:
    if axis is not None and not -a.ndim <= axis < a.ndim:
        raise AxisOutOfRange(f"axis {axis} out of range for rank {a.ndim}")


def sum(a: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    _check_axis(a, axis)
    shape = a.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _emit(np.asarray(a.data.sum(axis=axis)), (a,), bw)


def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    _check_axis(a, axis)
    count = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / count)


def reduce(op_kind: str, a: Tensor, axis: Optional[int] = None) -> Tensor:
    if op_kind == "sum":
        return sum(a, axis)
    if op_kind == "mean":
        return mean(a, axis)
    raise ValueError(f"unknown reduction {op_kind!r}")


def concat(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    if a.ndim != b.ndim:
        raise ShapeMismatch(f"concat: rank {a.ndim} vs {b.ndim}")
    _check_axis(a, axis)
    ax = axis % a.ndim
    for i, (x, y) in enumerate(zip(a.shape, b.shape)):
        if i != ax and x != y:
            raise ShapeMismatch(f"concat: shapes {a.shape} and {b.shape} differ off axis {ax}")
    split = a.shape[ax]

    def bw(g):
        ga, gb = np.split(g, [split], axis=ax)
        return ga, gb

    return _emit(np.concatenate([a.data, b.data], axis=ax), (a, b), bw)


def sort_ascending_with_permutation(a: Tensor) -> tuple:
    """Stable ascending sort; returns ``(sorted, perm)`` with ``sorted[i] == a[perm[i]]``.

    A 2-D input is sorted column by column along axis 0 and ``perm`` has the
    same shape.  Ties keep their original order.
    """
    if a.ndim not in (1, 2):
        raise ShapeMismatch(f"sort expects a 1-D or 2-D tensor, got rank {a.ndim}")
    perm = np.argsort(a.data, axis=0, kind="stable")
    values = np.take_along_axis(a.data, perm, axis=0)

    def bw(g):
        out = np.empty_like(g)
        np.put_along_axis(out, perm, g, axis=0)
        return (out,)

    return _emit(values, (a,), bw), perm


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    """Row-wise log-sum-exp with max subtraction, reducing ``axis``."""
    _check_axis(a, axis)
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=axis)
    softmax = e / s

    def bw(g):
        return (np.expand_dims(g, axis) * softmax,)

    return _emit(out, (a,), bw)


def stop_gradient(a: Tensor) -> Tensor:
    """A fresh constant with the same values; nothing flows back through it."""
    return Tensor._wrap(a.data)
