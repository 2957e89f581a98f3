"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every primitive call whose inputs require gradients appends one node to a
thread-local tape. :func:`backward` walks the tape once in reverse creation
order (a valid reverse topological order, since a node is always recorded
after its inputs) and clears it.

Broadcasting is limited to what the networks need: equal shapes, a row bias
``(1, k)`` / ``(k,)`` against ``(B, k)``, a column ``(B, 1)`` against
``(B, k)``, and scalars.
"""
from __future__ import annotations

import contextlib
import math
import threading
from collections import OrderedDict

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operand shapes are incompatible with a primitive."""


class NumericFailure(FloatingPointError):
    """A primitive produced a non-finite value, or a gradient is non-finite."""


_local = threading.local()


def _state():
    if not hasattr(_local, "tape"):
        _local.tape = []
        _local.enabled = True
    return _local


def tape_length() -> int:
    return len(_state().tape)


def clear_tape():
    _state().tape.clear()


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording nodes."""
    st = _state()
    prev = st.enabled
    st.enabled = False
    try:
        yield
    finally:
        st.enabled = prev


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "parents", "backward_fn", "op", "name")

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = ()
        self.backward_fn = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

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
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(value, parents, backward_fn, op):
    if not math.isfinite(value.sum()):
        raise NumericFailure(f"non-finite output from {op}")
    out = Tensor(value)
    out.op = op
    st = _state()
    if st.enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = backward_fn
        st.tape.append(out)
    return out


def _check_broadcast(a, b, op):
    if a == b or a == () or b == ():
        return
    for x, y in ((a, b), (b, a)):
        if len(x) == 2 and (y == (1, x[1]) or y == (x[1],) or y == (x[0], 1) or y == (1, 1)):
            return
    raise ShapeError(f"{op}: incompatible shapes {a} and {b}")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    if len(shape) == 1:
        return g.sum(axis=0)
    if shape == (1, 1):
        return g.sum().reshape(1, 1)
    if shape[0] == 1:
        return g.sum(axis=0, keepdims=True)
    return g.sum(axis=1, keepdims=True)


# -- binary primitives ------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    return _record(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g), "matmul")


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _record(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _record(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "mul")
    av, bv = a.value, b.value
    return _record(av * bv, (a, b),
                   lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)), "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "div")
    av, bv = a.value, b.value
    with np.errstate(divide="ignore", invalid="ignore"):
        out = av / bv
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)), "div")


def concat(a, b):
    """Concatenate two 2-D tensors along the last axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat: incompatible shapes {a.shape} and {b.shape}")
    k = a.shape[1]
    return _record(np.concatenate([a.value, b.value], axis=1), (a, b), lambda g: (g[:, :k], g[:, k:]), "concat")


# -- unary primitives -------------------------------------------------------

def _tanh_grad(y):
    return 1.0 - y * y


def tanh(a):
    a = as_tensor(a)
    y = np.tanh(a.value)
    return _record(y, (a,), lambda g: (g * _tanh_grad(y),), "tanh")


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a):
    a = as_tensor(a)
    x = a.value
    return _record(np.logaddexp(0.0, x), (a,), lambda g: (g * _sigmoid(x),), "softplus")


def exp(a):
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        y = np.exp(a.value)
    return _record(y, (a,), lambda g: (g * y,), "exp")


def log(a):
    a = as_tensor(a)
    x = a.value
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x)
    return _record(y, (a,), lambda g: (g / x,), "log")


def square(a):
    a = as_tensor(a)
    x = a.value
    return _record(x * x, (a,), lambda g: (2.0 * g * x,), "square")


def scale(a, k):
    a = as_tensor(a)
    k = float(k)
    return _record(a.value * k, (a,), lambda g: (g * k,), "scale")


def clamp(a, lo, hi):
    """Clip to ``[lo, hi]``; the gradient is zero where clipping is active."""
    a = as_tensor(a)
    x = a.value
    inside = (x >= lo) & (x <= hi)
    return _record(np.clip(x, lo, hi), (a,), lambda g: (g * inside,), "clamp")


def columns(a, start, stop):
    """Column slice ``a[:, start:stop]`` of a 2-D tensor."""
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _record(a.value[:, start:stop], (a,), back, "columns")


def sum_rows(a):
    """Sum along the last axis of a 2-D tensor, keeping a ``(B, 1)`` column."""
    a = as_tensor(a)
    shape = a.shape
    return _record(a.value.sum(axis=1, keepdims=True), (a,), lambda g: (np.broadcast_to(g, shape).copy(),),
                   "sum_rows")


def total(a):
    a = as_tensor(a)
    shape = a.shape
    return _record(np.asarray(a.value.sum()), (a,), lambda g: (np.full(shape, float(g)),), "total")


def mean(a):
    return scale(total(a), 1.0 / a.value.size)


def sum_squares(a):
    a = as_tensor(a)
    x = a.value
    return _record(np.asarray(np.sum(x * x)), (a,), lambda g: (2.0 * float(g) * x,), "sum_squares")


# -- reverse sweep ----------------------------------------------------------

def backward(root: Tensor, params: "ParameterSet | None" = None):
    """Accumulate d(root)/d(leaf) into every leaf's ``.grad`` and clear the tape.

    ``root`` must hold a single value. When ``params`` is given its gradients
    are zeroed first and returned as ``{name: array}``.
    """
    if root.value.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if params is not None:
        params.zero_grad()
    st = _state()
    tape = st.tape
    grads = {id(root): np.ones_like(root.value)}
    try:
        for node in reversed(tape):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if not parent.requires_grad:
                    continue
                if parent.backward_fn is None:
                    if parent.grad is None:
                        parent.grad = np.array(pg, dtype=np.float64)
                    else:
                        parent.grad += pg
                else:
                    key = id(parent)
                    grads[key] = pg if key not in grads else grads[key] + pg
    finally:
        tape.clear()
    if params is None:
        return None
    return OrderedDict((name, t.grad) for name, t in params.items())


# -- parameters and Adam ----------------------------------------------------

class ParameterSet:
    """Ordered named leaf tensors backed by one flat buffer, with Adam state.

    Each tensor's ``.value`` (and, after :meth:`zero_grad`, its ``.grad``) is
    a view into a contiguous array so the optimizer can update every
    parameter in one fused pass.
    """

    def __init__(self):
        self._tensors = OrderedDict()
        self._slices = OrderedDict()
        self.flat = np.zeros(0)
        self.flat_grad = np.zeros(0)
        self.m = np.zeros(0)
        self.v = np.zeros(0)
        self.step = 0

    def add(self, name, value):
        if name in self._tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = np.array(value, dtype=np.float64)
        start = self.flat.size
        self._slices[name] = (start, start + value.size, value.shape)
        self.flat = np.concatenate([self.flat, value.ravel()])
        self.flat_grad = np.zeros_like(self.flat)
        self.m = np.concatenate([self.m, np.zeros(value.size)])
        self.v = np.concatenate([self.v, np.zeros(value.size)])
        self._tensors[name] = Tensor(value, requires_grad=True, name=name)
        self._rebind()
        return self._tensors[name]

    def _rebind(self):
        for name, (a, b, shape) in self._slices.items():
            self._tensors[name].value = self.flat[a:b].reshape(shape)

    def view(self, buf, name):
        a, b, shape = self._slices[name]
        return buf[a:b].reshape(shape)

    def __getitem__(self, name):
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __len__(self):
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self):
        return list(self._tensors)

    def zero_grad(self):
        self.flat_grad[:] = 0.0
        for name, t in self._tensors.items():
            t.grad = self.view(self.flat_grad, name)

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, t.value) for k, t in self._tensors.items())

    def count(self) -> int:
        return self.flat.size

    def copy(self) -> "ParameterSet":
        out = ParameterSet()
        out._slices = OrderedDict(self._slices)
        out.flat = self.flat.copy()
        out.flat_grad = np.zeros_like(out.flat)
        out.m = self.m.copy()
        out.v = self.v.copy()
        out.step = self.step
        for name, (a, b, shape) in out._slices.items():
            out._tensors[name] = Tensor(out.flat[a:b].reshape(shape), requires_grad=True, name=name)
        out._rebind()
        return out

    @classmethod
    def from_arrays(cls, arrays) -> "ParameterSet":
        out = cls()
        for k, a in arrays.items():
            out.add(k, a)
        return out


def adam_step(params: ParameterSet, grads, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> ParameterSet:
    """One bias-corrected Adam update of every parameter, in place. Returns ``params``.

    ``grads`` maps each parameter name to its gradient; names absent from
    ``grads`` get a zero gradient (their moments still decay).
    """
    for name, g in grads.items():
        if np.shape(g) != params[name].shape:
            raise ShapeError(f"gradient for {name!r} has shape {np.shape(g)}, parameter {params[name].shape}")
    flat_g = params.flat_grad
    for name, g in grads.items():
        dst = params.view(flat_g, name)
        if not np.shares_memory(dst, g):
            dst[...] = g
    t = params.step + 1
    ok = kernels.adam_update(params.flat, flat_g, params.m, params.v, float(lr), float(beta1), float(beta2),
                             float(eps), 1.0 - beta1 ** t, 1.0 - beta2 ** t)
    if not ok:
        bad = [n for n, g in grads.items() if not np.all(np.isfinite(g))]
        raise NumericFailure(f"non-finite gradient for {bad or 'unknown'}")
    params.step = t
    return params
