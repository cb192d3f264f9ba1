"""Dense tensors with reverse-mode differentiation.

A ``Tensor`` wraps a numpy array. Operations on tensors that require gradients
record a node in a computation graph; :func:`backward` walks the graph in
reverse topological order and accumulates ``dLoss/dTensor`` for every leaf.

Broadcasting is limited to scalar/tensor pairs. Anything else must be spelled
out with :meth:`Tensor.reshape` and :meth:`Tensor.expand`.
"""

from __future__ import annotations

import contextlib
import contextvars
from collections.abc import Callable, Iterable, Iterator, Mapping, Sequence
from typing import Any

import numpy as np
from scipy.special import expit

from dualflow.errors import GradientError, NonFiniteError, ShapeError

_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "dualflow_grad_enabled", default=True
)
_default_dtype: contextvars.ContextVar[np.dtype] = contextvars.ContextVar(
    "dualflow_default_dtype", default=np.dtype(np.float64)
)
_check_finite: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "dualflow_check_finite", default=True
)

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


@contextlib.contextmanager
def default_dtype(dtype: Any) -> Iterator[None]:
    """Set the dtype used by tensor constructors inside the block."""
    token = _default_dtype.set(np.dtype(dtype))
    try:
        yield
    finally:
        _default_dtype.reset(token)


@contextlib.contextmanager
def finite_checks(enabled: bool) -> Iterator[None]:
    token = _check_finite.set(enabled)
    try:
        yield
    finally:
        _check_finite.reset(token)


def get_default_dtype() -> np.dtype:
    return _default_dtype.get()


def is_grad_enabled() -> bool:
    return _grad_enabled.get()


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to a scalar operand's shape."""
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum()).reshape(shape)


def _scalar_view(x: np.ndarray, other: np.ndarray) -> np.ndarray:
    if x.shape != other.shape and x.size == 1 and x.ndim <= other.ndim:
        return x.reshape(())
    return x


class Tensor:
    """An n-dimensional array that can take part in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op")
    __array_priority__ = 100.0

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        dtype: Any = None,
        name: str | None = None,
    ) -> None:
        self.data = np.array(data, dtype=dtype if dtype is not None else get_default_dtype())
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._op = "leaf"

    @classmethod
    def _from_op(
        cls,
        data: np.ndarray,
        parents: tuple[Tensor, ...],
        backward: BackwardFn,
        op: str,
    ) -> Tensor:
        if _check_finite.get() and not np.all(np.isfinite(data)):
            raise NonFiniteError(f"{op} produced non-finite values")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out._op = op
        track = _grad_enabled.get() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = parents if track else ()
        out._backward = backward if track else None
        return out

    # ------------------------------------------------------------------
    # Introspection
    # ------------------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
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

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.dtype)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op}{label})"

    def __len__(self) -> int:
        return self.shape[0]

    # ------------------------------------------------------------------
    # Elementwise arithmetic
    # ------------------------------------------------------------------
    def __add__(self, other: Any) -> Tensor:
        return _binary(self, other, "add", np.add, lambda g, a, b: (g, g))

    __radd__ = __add__

    def __sub__(self, other: Any) -> Tensor:
        return _binary(self, other, "sub", np.subtract, lambda g, a, b: (g, -g))

    def __rsub__(self, other: Any) -> Tensor:
        return _binary(other, self, "sub", np.subtract, lambda g, a, b: (g, -g))

    def __mul__(self, other: Any) -> Tensor:
        return _binary(self, other, "mul", np.multiply, lambda g, a, b: (g * b, g * a))

    __rmul__ = __mul__

    def __truediv__(self, other: Any) -> Tensor:
        return _binary(
            self, other, "div", np.divide, lambda g, a, b: (g / b, -g * a / (b * b))
        )

    def __rtruediv__(self, other: Any) -> Tensor:
        return _binary(
            other, self, "div", np.divide, lambda g, a, b: (g / b, -g * a / (b * b))
        )

    def __neg__(self) -> Tensor:
        return _unary(self, "neg", np.negative(self.data), lambda g, x, y: -g)

    def __pow__(self, exponent: float) -> Tensor:
        if isinstance(exponent, Tensor):
            raise ShapeError("tensor exponents are not supported; use exp/log")
        p = float(exponent)
        return _unary(
            self, "pow", np.power(self.data, p), lambda g, x, y: g * p * np.power(x, p - 1.0)
        )

    def square(self) -> Tensor:
        return _unary(self, "square", self.data * self.data, lambda g, x, y: 2.0 * g * x)

    def exp(self) -> Tensor:
        return _unary(self, "exp", np.exp(self.data), lambda g, x, y: g * y)

    def log(self) -> Tensor:
        return _unary(self, "log", np.log(self.data), lambda g, x, y: g / x)

    def sqrt(self) -> Tensor:
        return _unary(self, "sqrt", np.sqrt(self.data), lambda g, x, y: g * 0.5 / y)

    def sin(self) -> Tensor:
        return _unary(self, "sin", np.sin(self.data), lambda g, x, y: g * np.cos(x))

    def cos(self) -> Tensor:
        return _unary(self, "cos", np.cos(self.data), lambda g, x, y: -g * np.sin(x))

    def tanh(self) -> Tensor:
        return _unary(self, "tanh", np.tanh(self.data), lambda g, x, y: g * (1.0 - y * y))

    def sigmoid(self) -> Tensor:
        return _unary(self, "sigmoid", expit(self.data), lambda g, x, y: g * y * (1.0 - y))

    def relu(self) -> Tensor:
        return _unary(
            self, "relu", np.maximum(self.data, 0.0), lambda g, x, y: g * (x > 0.0)
        )

    # ------------------------------------------------------------------
    # Reductions and linear algebra
    # ------------------------------------------------------------------
    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        shape = self.shape
        out = np.sum(self.data, axis=axis, keepdims=keepdims)

        def back(g: np.ndarray) -> tuple[np.ndarray]:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return Tensor._from_op(np.asarray(out), (self,), back, "sum")

    def mean(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def __matmul__(self, other: Tensor) -> Tensor:
        other = as_tensor(other, like=self)
        if self.ndim != 2 or other.ndim != 2 or self.shape[1] != other.shape[0]:
            raise ShapeError(f"matmul: cannot multiply {self.shape} by {other.shape}")
        a, b = self.data, other.data

        def back(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
            return g @ b.T, a.T @ g

        return Tensor._from_op(a @ b, (self, other), back, "matmul")

    # ------------------------------------------------------------------
    # Shape manipulation
    # ------------------------------------------------------------------
    def reshape(self, *shape: int) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        try:
            out = self.data.reshape(shape)
        except ValueError as exc:
            raise ShapeError(f"reshape: cannot view {src} as {shape}") from exc
        return Tensor._from_op(out, (self,), lambda g: (g.reshape(src),), "reshape")

    def transpose(self, *axes: int) -> Tensor:
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return Tensor._from_op(
            np.transpose(self.data, axes), (self,), lambda g: (np.transpose(g, inverse),), "transpose"
        )

    @property
    def T(self) -> Tensor:
        return self.transpose()

    def expand(self, *shape: int) -> Tensor:
        """Repeat size-1 axes to ``shape``; the ranks must already agree."""
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        if len(shape) != len(src) or any(s != 1 and s != t for s, t in zip(src, shape)):
            raise ShapeError(f"expand: cannot expand {src} to {tuple(shape)}")
        axes = tuple(i for i, (s, t) in enumerate(zip(src, shape)) if s == 1 and t != 1)

        def back(g: np.ndarray) -> tuple[np.ndarray]:
            return (g.sum(axis=axes, keepdims=True) if axes else g,)

        return Tensor._from_op(np.broadcast_to(self.data, shape), (self,), back, "expand")

    def __getitem__(self, index: Any) -> Tensor:
        src, dtype = self.shape, self.dtype

        def back(g: np.ndarray) -> tuple[np.ndarray]:
            full = np.zeros(src, dtype=dtype)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._from_op(np.asarray(self.data[index]), (self,), back, "index")

    def backward(self, params: Iterable[Tensor] | None = None) -> Gradients:
        return backward(self, params)


def as_tensor(x: Any, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=like.dtype if like is not None else None)


def _unary(
    x: Tensor,
    op: str,
    out: np.ndarray,
    grad: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray],
) -> Tensor:
    xd = x.data
    return Tensor._from_op(np.asarray(out), (x,), lambda g: (grad(g, xd, out),), op)


def _binary(
    a: Any,
    b: Any,
    op: str,
    forward: Callable[[np.ndarray, np.ndarray], np.ndarray],
    grads: Callable[[np.ndarray, np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]],
) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(
            f"{op}: shapes {a.shape} and {b.shape} differ; reshape or expand explicitly"
        )
    ad = _scalar_view(a.data, b.data)
    bd = _scalar_view(b.data, a.data)
    out = np.asarray(forward(ad, bd))

    def back(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ga, gb = grads(g, ad, bd)
        return _reduce_to(np.asarray(ga), a.shape), _reduce_to(np.asarray(gb), b.shape)

    return Tensor._from_op(out, (a, b), back, op)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            i != axis % len(ref) and s != r for i, (s, r) in enumerate(zip(t.shape, ref))
        ):
            raise ShapeError(f"concat: shape {t.shape} incompatible with {ref} on axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g: np.ndarray) -> list[np.ndarray]:
        return np.split(g, splits, axis=axis)

    return Tensor._from_op(
        np.concatenate([t.data for t in tensors], axis=axis), tensors, back, "concat"
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([t.reshape(t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis=axis)


def zeros(shape: Sequence[int], requires_grad: bool = False, dtype: Any = None) -> Tensor:
    dtype = dtype if dtype is not None else get_default_dtype()
    return Tensor(np.zeros(tuple(shape), dtype=dtype), requires_grad=requires_grad)


def ones(shape: Sequence[int], requires_grad: bool = False, dtype: Any = None) -> Tensor:
    dtype = dtype if dtype is not None else get_default_dtype()
    return Tensor(np.ones(tuple(shape), dtype=dtype), requires_grad=requires_grad)


class Gradients(Mapping[str, np.ndarray]):
    """Gradient store returned by :func:`backward`.

    Index by tensor (``grads[t]``) or by parameter name when the backward pass
    was given a named parameter mapping. Tensors the loss does not reach get
    zeros.
    """

    def __init__(
        self,
        entries: dict[int, tuple[Tensor, np.ndarray]],
        names: Mapping[str, Tensor] | None = None,
    ) -> None:
        self._entries = entries
        self._names = dict(names or {})

    def of(self, tensor: Tensor) -> np.ndarray:
        entry = self._entries.get(id(tensor))
        if entry is not None and entry[0] is tensor:
            return entry[1]
        return np.zeros_like(tensor.data)

    def __getitem__(self, key: str | Tensor) -> np.ndarray:  # type: ignore[override]
        if isinstance(key, Tensor):
            return self.of(key)
        return self.of(self._names[key])

    def __iter__(self) -> Iterator[str]:
        return iter(self._names)

    def __len__(self) -> int:
        return len(self._names)

    def reached(self, tensor: Tensor) -> bool:
        entry = self._entries.get(id(tensor))
        return entry is not None and entry[0] is tensor


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, finished = stack_.pop()
        if finished:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack_.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack_.append((parent, False))
    return order


def backward(
    loss: Tensor,
    params: Iterable[Tensor] | Mapping[str, Tensor] | None = None,
) -> Gradients:
    """Accumulate ``dLoss/dLeaf`` for every leaf reachable from ``loss``.

    Leaves that require gradients get ``.grad`` set. Passing a mapping of
    named parameters lets the result be indexed by name.
    """
    if loss.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    names = params if isinstance(params, Mapping) else None

    entries: dict[int, tuple[Tensor, np.ndarray]] = {}
    if loss.requires_grad:
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(_topological_order(loss)):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                entries[id(node)] = (node, g)
                node.grad = g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = np.array(pg, dtype=parent.dtype)

    if params is not None:
        for tensor in params.values() if isinstance(params, Mapping) else params:
            if id(tensor) not in entries:
                tensor.grad = np.zeros_like(tensor.data)
    return Gradients(entries, names)
