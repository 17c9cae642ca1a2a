"""Dense tensors and the gradient tape.

A :class:`Tensor` wraps a row-major numpy array. Operations in
:mod:`mmvqa.numerics.ops` record themselves on the innermost active
:class:`Tape`; calling :meth:`Tape.backward` replays the recording in reverse
and accumulates gradients into every leaf that requires them.

Tapes are thread-confined: the active-tape stack is thread local.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from ..errors import ContractError, NumericError

_state = threading.local()

#: Raise :class:`NumericError` as soon as an op produces NaN or Inf.
CHECK_FINITE = True


def _stack():
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def active_tape():
    stack = _stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad():
    """Suspend recording for the enclosed block."""
    stack = _stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_produced", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = np.float32
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._produced = False
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return not self._produced

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def astype(self, dtype):
        """Return a leaf copy in ``dtype`` (not differentiable)."""
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, dtype=dtype, name=self.name)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # arithmetic sugar; the ops module holds the implementations
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            return ops.mul(self, other)
        return ops.scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)


class _Node:
    __slots__ = ("out", "inputs", "backward", "op")

    def __init__(self, out, inputs, backward, op):
        self.out = out
        self.inputs = inputs
        self.backward = backward
        self.op = op


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations executed inside the block whose
    inputs require gradients are appended in execution order, which is
    already a topological order.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out, inputs, backward, op):
        out.requires_grad = True
        out._produced = True
        self.nodes.append(_Node(out, inputs, backward, op))

    def backward(self, loss):
        """Populate ``.grad`` of every leaf reachable from ``loss``.

        Leaves that took part in recorded operations but do not influence
        the loss receive zero gradients. Gradients accumulate additively
        into any existing ``.grad``.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise ContractError("loss does not depend on any tensor that requires grad")
        grads = {id(loss): np.ones_like(loss.data)}
        leaves = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            for t in node.inputs:
                if t.requires_grad and not t._produced:
                    leaves.setdefault(id(t), t)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
        if not loss._produced:
            leaves[id(loss)] = loss
        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                g = np.zeros_like(t.data)
            g = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
            t.grad = g if t.grad is None else t.grad + g


def check_finite(arr, what):
    if CHECK_FINITE and not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {what}")


def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x), dtype=dtype)
