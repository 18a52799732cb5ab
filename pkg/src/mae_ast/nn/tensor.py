"""Dense tensors with tape-based reverse-mode differentiation.

Every array a :class:`Tensor` owns (plus whatever its backward closure keeps
alive) is accounted in :data:`TRACKER`, so benchmarks can read a high-water
mark of live tensor bytes without depending on the process allocator.
"""

from __future__ import annotations

import contextlib
import contextvars
import weakref
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """A forward value or gradient contained NaN or Inf."""


class MemoryTracker:
    """Counts live tensor bytes and remembers the high-water mark."""

    def __init__(self) -> None:
        self.live = 0
        self.peak = 0

    def alloc(self, nbytes: int) -> None:
        self.live += nbytes
        if self.live > self.peak:
            self.peak = self.live

    def free(self, nbytes: int) -> None:
        self.live -= nbytes

    def reset_peak(self) -> int:
        self.peak = self.live
        return self.peak


TRACKER = MemoryTracker()

_fault_context: contextvars.ContextVar[str] = contextvars.ContextVar("fault_context", default="")
_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_enabled", default=True)


@contextlib.contextmanager
def fault_context(label: str):
    """Attach ``label`` (layer name, step, ...) to any NonFiniteError raised inside."""
    outer = _fault_context.get()
    token = _fault_context.set(f"{outer}/{label}" if outer else label)
    try:
        yield
    finally:
        _fault_context.reset(token)


@contextlib.contextmanager
def no_grad():
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def check_finite(values: np.ndarray, what: str) -> None:
    if not np.isfinite(values).all():
        where = _fault_context.get() or "<top>"
        raise NonFiniteError(f"non-finite values in {what} at {where}")


def _owned_bytes(arr: np.ndarray) -> int:
    return arr.nbytes if arr.base is None else 0


class Tensor:
    """An ndarray plus the bookkeeping needed to backpropagate through it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "__weakref__")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: Sequence["Tensor"] = (),
        _backward: Optional[Callable[[np.ndarray], Iterable[Optional[np.ndarray]]]] = None,
        _op: str = "leaf",
        _saved: Sequence[np.ndarray] = (),
    ) -> None:
        if not isinstance(data, np.ndarray):
            data = np.asarray(data, dtype=np.float64)
        self.data = data
        self.grad: Optional[np.ndarray] = None
        self._op = _op
        track = _grad_enabled.get() and (requires_grad or any(p.requires_grad for p in _parents))
        self.requires_grad = bool(track)
        if track and _parents:
            self._parents = tuple(_parents)
            self._backward = _backward
        else:
            self._parents = ()
            self._backward = None
            _saved = ()
        nbytes = _owned_bytes(data) + sum(_owned_bytes(s) for s in _saved)
        if nbytes:
            TRACKER.alloc(nbytes)
            weakref.finalize(self, TRACKER.free, nbytes)

    # shape helpers -------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op})"

    # operator sugar ------------------------------------------------------
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops

        return ops.getitem(self, index)

    def reshape(self, *shape):
        from . import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops

        return ops.transpose(self, axes)

    # autodiff ------------------------------------------------------------
    def zero_grad(self) -> None:
        release_grad(self)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring grad.

        The graph is released as it is consumed, so saved activations are
        freed; calling backward twice on the same graph is an error.
        """
        if not self.requires_grad:
            raise RuntimeError("tensor does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("backward without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)

        order = _toposort(self)
        # id -> (gradient, bytes counted for it)
        grads: dict[int, tuple[np.ndarray, int]] = {id(self): (grad, _owned_bytes(grad))}
        TRACKER.alloc(_owned_bytes(grad))
        for node in order:
            entry = grads.pop(id(node), None)
            if entry is None:
                continue
            g, counted = entry
            if node._backward is None:
                # leaf: the gradient stays live until release_grad
                if node.grad is None:
                    node.grad = np.array(g)
                    TRACKER.alloc(node.grad.nbytes)
                else:
                    node.grad += g
                TRACKER.free(counted)
                continue
            parent_grads = node._backward(g)
            del g
            TRACKER.free(counted)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise RuntimeError(f"{node._op}: grad shape {pg.shape} != {parent.shape}")
                key = id(parent)
                if key in grads:
                    prev, prev_counted = grads[key]
                    total = prev + pg
                    TRACKER.free(prev_counted)
                    TRACKER.alloc(total.nbytes)
                    grads[key] = (total, total.nbytes)
                else:
                    n = _owned_bytes(pg)
                    TRACKER.alloc(n)
                    grads[key] = (pg, n)
            node._parents = ()
            node._backward = None


def release_grad(t: Tensor) -> None:
    """Drop a leaf gradient and its byte accounting."""
    if t.grad is not None:
        TRACKER.free(t.grad.nbytes)
        t.grad = None


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    order.reverse()
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    return Tensor(arr)
