"""Dense float64 tensors and the operation tape used for reverse-mode differentiation."""

from __future__ import annotations

import numpy as np


class NumericError(FloatingPointError):
    """A NaN or infinity reached an operation boundary."""


class DimensionError(ValueError):
    pass


class TapeConsumedError(RuntimeError):
    pass


class Tensor:
    """Row-major float64 array with optional gradient buffer.

    Operations only record onto a :class:`Tape` while one is active; outside a tape
    every computation is a plain forward pass.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; implementations live in ops
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

    def __truediv__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            raise TypeError("tensor division is only defined by a python scalar")
        return ops.scale(self, 1.0 / other)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, idx):
        from . import ops
        return ops.getitem(self, idx)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        return ops.transpose(self, axes)

    def sum(self):
        from . import ops
        return ops.sum(self)

    def mean(self):
        from . import ops
        return ops.mean(self)


_TAPE_STACK: list[Tape] = []


def current_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class no_tape:
    """Suspend recording, e.g. for inference inside a training step."""

    def __enter__(self):
        self._saved = list(_TAPE_STACK)
        _TAPE_STACK.clear()
        return self

    def __exit__(self, *exc):
        _TAPE_STACK[:] = self._saved
        return False


class Tape:
    """Ordered record of differentiable operations.

    Recording order is a topological order of the computation, so reverse traversal
    visits every node after all of its consumers. A tape can be traversed once.
    """

    def __init__(self):
        self.nodes = []
        self.consumed = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out, parents, backward_fn):
        if self.consumed:
            raise TapeConsumedError("cannot record onto a consumed tape")
        out._tape = self
        self.nodes.append((out, parents, backward_fn))

    def backward(self, loss, visit=None):
        if self.consumed:
            raise TapeConsumedError("backward already ran over this tape; re-record the forward pass")
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        self.consumed = True
        loss.grad = np.ones_like(loss.data)
        for out, parents, fn in reversed(self.nodes):
            g = out.grad
            if g is None:
                continue
            if visit is not None:
                visit(out)
            # intermediate gradients are released as soon as they are propagated
            if out is not loss:
                out.grad = None
            for p, gp in zip(parents, fn(g)):
                if gp is None or not p.requires_grad:
                    continue
                p.grad = gp if p.grad is None else p.grad + gp
        loss.grad = None
        self.nodes = []


def backward(loss):
    """Populate ``.grad`` on every leaf that requires grad with d(loss)/d(leaf)."""
    tape = loss._tape
    if tape is None:
        raise RuntimeError("loss was not produced by recorded operations (run the forward inside a Tape)")
    tape.backward(loss)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def result(data, parents, backward_fn):
    """Wrap an op output, recording it when a tape is active and any input needs grad."""
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, parents, backward_fn)
    return out
