"""N-dimensional tensor with reverse-mode automatic differentiation.

Every op builds a node holding references to its inputs and a closure that
maps the output gradient to input gradients. ``Tensor.backward`` sorts the
graph topologically and walks it in reverse, then releases the graph so a
second backward through the same nodes is rejected.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np

ArrayLike = Union[np.ndarray, float, int, Sequence]

_local = threading.local()


def _state():
    if not hasattr(_local, "grad_enabled"):
        _local.grad_enabled = True
        _local.dtype = np.float32
        _local.pattern_log = None
    return _local


def get_default_dtype() -> type:
    return _state().dtype


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _state().dtype = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the dtype used for newly created tensors."""
    old = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state().dtype = old


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    st = _state()
    old = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = old


def is_grad_enabled() -> bool:
    return _state().grad_enabled


@contextlib.contextmanager
def record_patterns() -> Iterator[list]:
    """Collect activation patterns (relu masks, pool argmaxes) of ops run inside.

    Used by the gradient checker to detect finite-difference steps that
    cross a non-differentiable point.
    """
    st = _state()
    old = st.pattern_log
    st.pattern_log = []
    try:
        yield st.pattern_log
    finally:
        st.pattern_log = old


def log_pattern(arr: np.ndarray) -> None:
    log = _state().pattern_log
    if log is not None:
        log.append(np.ascontiguousarray(arr).tobytes())


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """A numpy array plus the bookkeeping needed for backpropagation."""

    # make ``ndarray <op> Tensor`` dispatch to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        dtype = dtype or get_default_dtype()
        self.data = np.array(data, dtype=dtype)
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError("tensor data contains NaN or Inf")
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[BackwardFn] = None
        self._consumed = False
        self.op = "leaf"

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"],
                 backward: BackwardFn, op: str) -> "Tensor":
        if not np.all(np.isfinite(data)):
            raise FloatingPointError(f"{op} produced NaN or Inf")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = is_grad_enabled() and any(p.requires_grad for p in parents)
        out._consumed = False
        out.op = op
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # ------------------------------------------------------------------ basics
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype.type)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data, requires_grad=self.requires_grad, dtype=dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __len__(self) -> int:
        return self.shape[0]

    # --------------------------------------------------------------- autograd
    def backward(self, grad: Optional[ArrayLike] = None) -> None:
        """Backpropagate from this tensor into every reachable tensor's ``grad``."""
        if self._consumed:
            raise RuntimeError("backward called twice on the same graph; "
                               "run a fresh forward pass first")
        if not self.requires_grad:
            raise RuntimeError("nothing to differentiate: tensor does not require grad")
        if grad is None:
            if self.size != 1:
                raise ValueError(f"backward needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.shape)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            node.grad = g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = unbroadcast(np.asarray(pg, dtype=parent.data.dtype), parent.shape)
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._consumed = True

    # ------------------------------------------------------------- arithmetic
    def _wrap(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other) -> "Tensor":
        other = self._wrap(other)
        return Tensor._from_op(self.data + other.data, (self, other),
                               lambda g: (g, g), "add")

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other) -> "Tensor":
        other = self._wrap(other)
        return Tensor._from_op(self.data - other.data, (self, other),
                               lambda g: (g, -g), "sub")

    def __rsub__(self, other) -> "Tensor":
        return self._wrap(other) - self

    def __mul__(self, other) -> "Tensor":
        other = self._wrap(other)
        a, b = self.data, other.data
        return Tensor._from_op(a * b, (self, other),
                               lambda g: (g * b, g * a), "mul")

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = self._wrap(other)
        a, b = self.data, other.data
        return Tensor._from_op(a / b, (self, other),
                               lambda g: (g / b, -g * a / (b * b)), "div")

    def __rtruediv__(self, other) -> "Tensor":
        return self._wrap(other) / self

    def __pow__(self, exponent: float) -> "Tensor":
        a = self.data
        return Tensor._from_op(a ** exponent, (self,),
                               lambda g: (g * exponent * a ** (exponent - 1),), "pow")

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, self._wrap(other))

    # ------------------------------------------------------------ elementwise
    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._from_op(out, (self,), lambda g: (g * out,), "exp")

    def log(self) -> "Tensor":
        a = self.data
        if np.any(a <= 0):
            raise ValueError("log of non-positive value")
        return Tensor._from_op(np.log(a), (self,), lambda g: (g / a,), "log")

    def relu(self) -> "Tensor":
        mask = self.data > 0
        log_pattern(mask)
        return Tensor._from_op(self.data * mask, (self,), lambda g: (g * mask,), "relu")

    def sigmoid(self) -> "Tensor":
        a = self.data
        # split by sign so exp never overflows
        e = np.exp(-np.abs(a))
        out = np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.dtype)
        return Tensor._from_op(out, (self,), lambda g: (g * out * (1.0 - out),), "sigmoid")

    # ------------------------------------------------------------- reductions
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, _norm_axes(axis, len(shape)))
            return (np.broadcast_to(g, shape),)

        return Tensor._from_op(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)),
                               (self,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.size if axis is None else int(np.prod([self.shape[a] for a in _norm_axes(axis, self.ndim)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # ----------------------------------------------------------------- shapes
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._from_op(self.data.reshape(shape), (self,),
                               lambda g: (g.reshape(old),), "reshape")

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return Tensor._from_op(self.data.transpose(axes), (self,),
                               lambda g: (g.transpose(inverse),), "transpose")

    def broadcast_to(self, shape) -> "Tensor":
        shape = tuple(shape)
        return Tensor._from_op(np.broadcast_to(self.data, shape).copy(), (self,),
                               lambda g: (g,), "broadcast_to")

    def __getitem__(self, index) -> "Tensor":
        shape, dtype = self.shape, self.data.dtype

        def backward(g):
            full = np.zeros(shape, dtype=dtype)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._from_op(np.array(self.data[index]), (self,), backward, "getitem")


def _norm_axes(axis, ndim: int) -> tuple:
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise np.exceptions.AxisError(f"axis {a} out of range for {ndim}-d tensor")
        out.append(a % ndim)
    return tuple(sorted(out))


def tensor(data: ArrayLike, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    x, y = a.data, b.data

    def backward(g):
        return (g @ np.swapaxes(y, -1, -2), np.swapaxes(x, -1, -2) @ g)

    return Tensor._from_op(x @ y, (a, b), backward, "matmul")


def relu(x: Tensor) -> Tensor:
    return x.relu()


def sigmoid(x: Tensor) -> Tensor:
    return x.sigmoid()
