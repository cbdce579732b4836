"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record onto the innermost active :class:`Tape` whenever at least one
operand requires a gradient. A tape can be differentiated exactly once::

    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = (x * x).sum()
    tape.backward(loss)
    x.grad  # array([2., 4.])

Conventions: ``relu'(0) = 0``, ``sign(0) = 0``, the gradient of ``l2_norm`` at
the origin is zero and normalizations divide by ``max(norm, NORM_GUARD)``.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import DimensionError, DomainError, UsageError

NORM_GUARD = 1e-12

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional["Tape"]:
    """Return the innermost active tape of the calling thread, if any."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Row-major float64 array participating in differentiation.

    Attributes:
        data: the underlying ``numpy`` array (always float64).
        requires_grad: whether gradients flow to this tensor.
        grad: gradient populated by :meth:`Tape.backward` for leaves.
        tape: the tape this tensor was produced on, ``None`` for leaves.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape", "_is_leaf")
    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False, copy: bool = True):
        if isinstance(data, Tensor):
            data = data.data
        self.data: np.ndarray = np.array(data, dtype=np.float64) if copy else np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.tape: Optional[Tape] = None
        self._is_leaf = True

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tape_id(self) -> Optional[int]:
        return None if self.tape is None else id(self.tape)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return detach(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

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

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        raise TypeError("only division by a Python scalar is supported")

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis: Optional[int] = None) -> "Tensor":
        return tsum(self, axis)

    def mean(self, axis: Optional[int] = None) -> "Tensor":
        return mean(self, axis)


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class _Node:
    __slots__ = ("out", "inputs", "backward_fn", "kind")

    def __init__(self, kind: str, out: Tensor, inputs: tuple, backward_fn: BackwardFn):
        self.kind = kind
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations executed inside the ``with`` block
    are recorded. Tapes are confined to the thread that created them.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.active = False
        self._consumed = False

    def __enter__(self) -> "Tape":
        if self._consumed:
            raise UsageError("cannot re-enter a tape that was already differentiated")
        _tape_stack().append(self)
        self.active = True
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        self.active = False

    def record(self, kind: str, out: Tensor, inputs: tuple, backward_fn: BackwardFn) -> None:
        out.requires_grad = True
        out.tape = self
        out._is_leaf = False
        self.nodes.append(_Node(kind, out, inputs, backward_fn))

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every requires-grad leaf reachable on this tape."""
        if loss.tape is not self:
            raise UsageError("loss was not recorded on this tape")
        if self._consumed:
            raise UsageError("backward already called on this tape; record a new one")
        if loss.data.size != 1:
            raise UsageError(f"backward requires a scalar loss, got shape {loss.shape}")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            for inp in node.inputs:
                if inp.requires_grad and inp._is_leaf:
                    leaves[id(inp)] = inp
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward_fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        for key, leaf in leaves.items():
            g = grads.get(key)
            leaf.grad = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=np.float64).reshape(leaf.shape)
        self.nodes = []
        self.active = False


def backward(loss: Tensor) -> None:
    """Differentiate ``loss`` on the tape that produced it."""
    if not isinstance(loss, Tensor) or loss.tape is None:
        raise UsageError("backward needs a loss produced under an active tape")
    loss.tape.backward(loss)


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(kind: str, out_data: np.ndarray, inputs: tuple, backward_fn: BackwardFn) -> Tensor:
    out = Tensor(out_data, copy=False)
    tape = active_tape()
    if tape is not None and tape.active and any(t.requires_grad for t in inputs):
        tape.record(kind, out, inputs, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _record(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _record(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _record(
        "mul", a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: ArrayLike, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0.0
    return _record("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tanh(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _record("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def elementwise(op: str, *operands, **kwargs) -> Tensor:
    """Dispatch an elementwise op by name: add, sub, mul, relu, tanh or scale."""
    table = {"add": add, "sub": sub, "mul": mul, "relu": relu, "tanh": tanh, "scale": scale}
    if op not in table:
        raise DomainError(f"unknown elementwise op {op!r}")
    return table[op](*operands, **kwargs)


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    return _record(
        "matmul", a.data @ b.data, (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def tsum(a: ArrayLike, axis: Optional[int] = None) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum", np.asarray(out, dtype=np.float64), (a,), bw)


def mean(a: ArrayLike, axis: Optional[int] = None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis), 1.0 / n)


def detach(a: ArrayLike) -> Tensor:
    """Copy of ``a`` that is cut off from any tape."""
    return Tensor(as_tensor(a).data, requires_grad=False)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a plain array (no tape participation)."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: ArrayLike, labels) -> Tensor:
    """Batch-mean of ``-log softmax(logits)[label]``.

    Stabilized by subtracting the row maximum. The backward pass yields
    ``(softmax - onehot) / B`` on the logits.
    """
    logits = as_tensor(logits)
    if logits.data.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy expects B x C logits, got {logits.shape}")
    b, c = logits.shape
    labels = np.asarray(labels)
    if b < 1:
        raise DomainError("softmax_cross_entropy needs at least one example")
    if labels.shape != (b,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch size {b}")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(np.equal(np.mod(labels, 1), 0)):
            raise DomainError("labels must be integers")
        labels = labels.astype(np.int64)
    if labels.min() < 0 or labels.max() >= c:
        raise DomainError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(b)
    nll = log_norm - z[rows, labels]
    value = nll.mean()

    def bw(g):
        probs = np.exp(z - log_norm[:, None])
        probs[rows, labels] -= 1.0
        return (probs * (g / b),)

    return _record("softmax_cross_entropy", np.asarray(value), (logits,), bw)


def l2_norm(v: ArrayLike) -> Tensor:
    """Euclidean norm over all elements; gradient at the origin is zero."""
    v = as_tensor(v)
    n = float(np.sqrt(np.sum(v.data * v.data)))

    def bw(g):
        if n == 0.0:
            return (np.zeros_like(v.data),)
        return (g * v.data / n,)

    return _record("l2_norm", np.asarray(n), (v,), bw)


def normalize_rows(x: ArrayLike, guard: float = NORM_GUARD) -> Tensor:
    """Divide each row of a 2-D tensor by ``max(||row||_2, guard)``."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"normalize_rows expects a 2-D tensor, got {x.shape}")
    raw = np.sqrt(np.sum(x.data * x.data, axis=1, keepdims=True))
    clamped = raw <= guard
    denom = np.where(clamped, guard, raw)
    y = x.data / denom

    def bw(g):
        # off the guard: (g - y <y, g>) / ||x||; on the guard the denominator is constant
        proj = np.sum(y * g, axis=1, keepdims=True)
        return (np.where(clamped, g, g - y * proj) / denom,)

    return _record("normalize_rows", y, (x,), bw)
