"""Dense tensors with a recorded graph and per-op analytic adjoints."""

from __future__ import annotations

import os
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

_state = {
    "dtype": np.float32,
    "grad_enabled": True,
    "regions": None,
    "check_finite": os.environ.get("PSVIT_CHECK_FINITE", "") == "1",
}


class NonFiniteError(FloatingPointError):
    """Raised when a tensor holds NaN or Inf."""


def default_dtype():
    return _state["dtype"]


@contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the storage dtype of newly created tensors.

    Gradient audits run under ``precision(np.float64)`` so central
    differences have enough headroom.
    """
    prev = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextmanager
def no_grad() -> Iterator[None]:
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


@contextmanager
def trace_regions() -> Iterator[list]:
    """Collect the smooth-piece signature of every piecewise op evaluated.

    Two evaluations with equal traces ran on the same differentiable piece
    of every ReLU, clamp, max-pool and bilinear cell.
    """
    prev = _state["regions"]
    records: list = []
    _state["regions"] = records
    try:
        yield records
    finally:
        _state["regions"] = prev


def check_finite_enabled() -> bool:
    """Post-op NaN/Inf assertions; read from PSVIT_CHECK_FINITE at import."""
    return _state["check_finite"]


def set_check_finite(enabled: bool) -> None:
    _state["check_finite"] = bool(enabled)


class Tensor:
    """Row-major float array with an optional gradient buffer.

    Tensors built by users are checked for NaN/Inf. Tensors produced by
    operations are only checked when ``PSVIT_CHECK_FINITE=1``.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_op", "_attrs")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=default_dtype())
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite value in tensor {name or ''}".rstrip())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._op: DiffOp | None = None
        self._attrs: dict = {}

    @classmethod
    def _from_op(cls, data: np.ndarray, parents, op, attrs) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.name = None
        needs = _state["grad_enabled"] and any(p.requires_grad for p in parents)
        t.requires_grad = needs
        t._parents = tuple(parents) if needs else ()
        t._op = op if needs else None
        t._attrs = attrs if needs else {}
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        ``grad`` defaults to ones for scalar outputs. Leaf buffers are added
        to, never overwritten; callers zero them between steps.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.shape)

        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._op is None:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            inputs = tuple(p.data for p in node._parents)
            in_grads = node._op.adjoint(inputs, node.data, g, **node._attrs)
            for parent, pg in zip(node._parents, in_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar; the actual ops live in psvit.ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, _wrap(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, _wrap(other, self))

    def __rsub__(self, other):
        from . import ops
        return ops.sub(_wrap(other, self), self)

    def __mul__(self, other):
        from . import ops
        if np.isscalar(other):
            return ops.scale(self, factor=float(other))
        return ops.mul(self, _wrap(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("only division by a scalar is supported")
        return self * (1.0 / float(other))

    def __neg__(self):
        return self * -1.0

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, key):
        from . import ops
        return ops.index(self, key=key)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape=tuple(shape))

    def transpose(self, *axes):
        from . import ops
        return ops.transpose(self, axes=tuple(axes) if axes else None)

    @property
    def mT(self):
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return self.transpose(*axes)

    def sum(self):
        from . import ops
        return ops.sum_all(self)


def _wrap(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


class DiffOp:
    """A forward function paired with its adjoint.

    ``forward(*arrays, **attrs)`` returns the output array.
    ``adjoint(inputs, output, upstream, **attrs)`` returns one gradient (or
    None) per input, in the order the forward consumed them.
    ``region(*arrays, **attrs)``, for piecewise ops, identifies the smooth
    piece the inputs fall in.
    """

    def __init__(
        self,
        name: str,
        forward: Callable[..., np.ndarray],
        adjoint: Callable[..., Sequence[np.ndarray | None]],
        region: Callable[..., np.ndarray] | None = None,
    ):
        self.name = name
        self.forward = forward
        self.adjoint = adjoint
        self.region = region

    def __repr__(self) -> str:
        return f"DiffOp({self.name!r})"

    def __call__(self, *inputs: Tensor, **attrs) -> Tensor:
        arrays = [t.data for t in inputs]
        out = np.asarray(self.forward(*arrays, **attrs))
        records = _state["regions"]
        if records is not None and self.region is not None:
            records.append(np.asarray(self.region(*arrays, **attrs)).tobytes())
        dtype = default_dtype()
        if out.dtype != dtype:
            out = out.astype(dtype)
        if _state["check_finite"] and not np.all(np.isfinite(out)):
            raise NonFiniteError(f"{self.name} produced a non-finite value")
        return Tensor._from_op(out, inputs, self, attrs)


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)
