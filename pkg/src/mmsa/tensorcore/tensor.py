"""Reverse-mode differentiation over numpy arrays.

Every differentiable operation appends a node ``(output, parents, vjp)`` to the
active :class:`Tape`.  :func:`backward` walks the tape in reverse and pushes
vector-Jacobian products to the parents.  A tape is single use: once a loss
recorded on it has been differentiated, the tape is closed and any further
use of its nodes is an error.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager

import numpy as np

DTYPE = np.float64


class TapeError(RuntimeError):
    """Misuse of the differentiation tape (stale tape, repeated backward...)."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


_local = threading.local()
_tape_ids = itertools.count(1)


class Tape:
    """An ordered record of differentiable operations."""

    def __init__(self):
        self.id = next(_tape_ids)
        self.nodes = []
        self.closed = False

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)


def _stack():
    st = getattr(_local, "stack", None)
    if st is None:
        st = _local.stack = []
    return st


def current_tape() -> Tape:
    st = _stack()
    if st:
        return st[-1]
    tape = getattr(_local, "default", None)
    if tape is None or tape.closed:
        tape = _local.default = Tape()
    return tape


def grad_enabled() -> bool:
    return getattr(_local, "grad", True)


@contextmanager
def no_grad():
    """Evaluate values only; nothing is recorded."""
    prev = grad_enabled()
    _local.grad = False
    try:
        yield
    finally:
        _local.grad = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_tape", "_idx", "__weakref__")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._tape = None
        self._idx = -1

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def tape_id(self):
        return None if self._tape is None else self._tape.id

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    # -- arithmetic ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return _record(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- common unary ops as methods ------------------------------------
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def abs(self):
        return tabs(self)

    def clip(self, lo, hi):
        return clip(self, lo, hi)


def _not_scalar(t):
    raise TapeError(f"expected a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data, parents, vjp):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._idx = -1
    out._tape = None
    out.requires_grad = False
    if not grad_enabled():
        return out
    live = [p for p in parents if p.requires_grad]
    if not live:
        return out
    tape = current_tape()
    if tape.closed:
        raise TapeError("stale tape: this tape has already been differentiated; open a new Tape()")
    for p in live:
        pt = p._tape
        if pt is not None and pt is not tape:
            if pt.closed:
                raise TapeError("stale tape: operand was recorded on a tape that has already been differentiated")
            raise TapeError("operands recorded on different live tapes")
    out.requires_grad = True
    out._tape = tape
    out._idx = len(tape.nodes)
    tape.nodes.append((out, parents, vjp))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires_grad tensor reachable from ``loss``."""
    if not isinstance(loss, Tensor):
        raise TapeError("backward() expects a Tensor")
    if loss.data.size != 1:
        raise TapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        if loss.requires_grad:
            raise TapeError("backward() called on a leaf tensor")
        raise TapeError("loss does not depend on any differentiable tensor")
    if tape.closed:
        raise TapeError("stale tape: backward() already ran on this tape; rebuild the graph first")

    grads = {id(loss): np.ones_like(loss.data)}
    nodes = tape.nodes
    for k in range(loss._idx, -1, -1):
        out, parents, vjp = nodes[k]
        g = grads.pop(id(out), None)
        if g is None:
            continue
        out.grad = g
        for p, gp in zip(parents, vjp(g)):
            if gp is None or not p.requires_grad:
                continue
            if p._tape is None:
                p.grad = np.array(gp, dtype=DTYPE) if p.grad is None else p.grad + gp
            else:
                key = id(p)
                prev = grads.get(key)
                grads[key] = gp if prev is None else prev + gp
    tape.closed = True
    tape.nodes = []


def stop_gradient(x) -> Tensor:
    """Same values, no gradient path back to ``x``."""
    x = as_tensor(x)
    out = Tensor.__new__(Tensor)
    out.data = x.data
    out.grad = None
    out.requires_grad = False
    out.name = None
    out._tape = None
    out._idx = -1
    return out


# ---------------------------------------------------------------------------
# elementwise and structural primitives


def unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def vjp(g):
        return (
            unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _record(ad * bd, (a, b), vjp)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        return (
            unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _record(out, (a, b), vjp)


def power(a, p: float):
    a = as_tensor(a)
    ad = a.data
    return _record(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),))


def square(a):
    a = as_tensor(a)
    ad = a.data
    return _record(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    ad = a.data
    return _record(np.log(ad), (a,), lambda g: (g / ad,))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def relu(a):
    a = as_tensor(a)
    pos = a.data > 0
    return _record(np.maximum(a.data, 0.0), (a,), lambda g: (g * pos,))


def elu_values(x):
    """elu(x) and its derivative, without data-dependent branches."""
    e = np.expm1(np.minimum(x, 0.0))
    out = np.maximum(x, 0.0)
    out += e
    e += 1.0
    return out, e


def elu(a):
    a = as_tensor(a)
    out, deriv = elu_values(a.data)
    return _record(out, (a,), lambda g: (g * deriv,))


def tabs(a):
    a = as_tensor(a)
    s = np.sign(a.data)
    return _record(np.abs(a.data), (a,), lambda g: (g * s,))


def clip(a, lo, hi):
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _record(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def maximum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "maximum")
    pick_a = a.data >= b.data
    sa, sb = a.shape, b.shape
    return _record(
        np.maximum(a.data, b.data),
        (a, b),
        lambda g: (unbroadcast(g * pick_a, sa), unbroadcast(g * ~pick_a, sb)),
    )


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _record(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), vjp)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / float(n))


def reshape(a, shape):
    a = as_tensor(a)
    src = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def _is_basic(idx):
    """Slices, ints and Ellipsis select each element at most once."""
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in items)


def getitem(a, idx):
    a = as_tensor(a)
    shape = a.shape

    basic = _is_basic(idx)

    def vjp(g):
        full = np.zeros(shape, dtype=DTYPE)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _record(a.data[idx], (a,), vjp)


def take(a, idx):
    """Rows ``a[idx]`` along the first axis for an integer index array."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    shape = a.shape
    unique = len(np.unique(idx)) == len(idx)

    def vjp(g):
        full = np.zeros(shape, dtype=DTYPE)
        if unique:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _record(a.data[idx], (a,), vjp)


def concat(tensors, axis=-1):
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    cuts = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _record(out, tuple(ts), lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)
    n = len(ts)
    return _record(
        out, tuple(ts), lambda g: tuple(np.squeeze(c, axis=axis) for c in np.split(g, n, axis=axis))
    )


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.shape[-1] != bd.shape[-2 if bd.ndim > 1 else 0]:
        raise DimensionError(f"matmul: shapes {ad.shape} and {bd.shape} are not aligned")
    out = ad @ bd
    if ad.ndim == 1 or bd.ndim == 1:
        a2 = ad.reshape(1, -1) if ad.ndim == 1 else ad
        b2 = bd.reshape(-1, 1) if bd.ndim == 1 else bd

        def vjp1(g):
            g2 = g.reshape(a2.shape[:-1] + b2.shape[-1:])
            ga = (g2 @ np.swapaxes(b2, -1, -2)).reshape(ad.shape)
            gb = unbroadcast(np.swapaxes(a2, -1, -2) @ g2, b2.shape).reshape(bd.shape)
            return ga, gb

        return _record(out, (a, b), vjp1)

    def vjp(g):
        ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), vjp)
