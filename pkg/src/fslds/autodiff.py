"""Reverse-mode automatic differentiation on an explicit tape.

Every operation in this module is polymorphic: given only plain numpy
arrays/floats it evaluates eagerly and returns a numpy value, and given at
least one :class:`Tensor` it records a node on that tensor's :class:`Tape`.
Model code can therefore be written once and run either as a cheap numeric
forward pass or as a differentiable graph.

Broadcasting is deliberately limited to scalar-vs-tensor (0-d operands).
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeError", "backward", "finite_diff_check",
    "finite_diff_errors", "add", "sub", "mul", "div", "neg", "matmul",
    "exp", "log", "tanh", "sigmoid", "softplus", "square", "clip",
    "clamp_min", "sum", "concatenate", "reshape", "value",
]


class ShapeError(ValueError):
    pass


class Tensor:
    """A real-valued array living on a tape."""

    __slots__ = ("data", "tape", "index", "name", "grad")
    # make numpy defer to our reflected operators (ndarray * Tensor)
    __array_ufunc__ = None

    def __init__(self, data, tape: "Tape", index: int, name: str | None = None):
        self.data = data
        self.tape = tape
        self.index = index
        self.name = name
        self.grad = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, data={self.data!r})"

    def __len__(self):
        return len(self.data)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    __neg__ = lambda self: neg(self)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None):
        return sum(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


class _Node:
    __slots__ = ("out", "parents", "vjp")

    def __init__(self, out: int, parents: tuple, vjp: Callable):
        self.out = out
        self.parents = parents
        self.vjp = vjp


class Tape:
    """Ordered record of operations; rebuilt for every loss evaluation.

    Not thread-safe. Use one tape per thread.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: list[Tensor] = []
        self._count = 0

    def _next(self) -> int:
        i = self._count
        self._count += 1
        return i

    def leaf(self, value, name: str | None = None) -> Tensor:
        t = Tensor(np.array(value, dtype=_dtype_of(value)), self, self._next(), name)
        self.leaves.append(t)
        return t

    def record(self, value, parents: Sequence, vjp: Callable) -> Tensor:
        """Append a node. ``vjp(g)`` must return one cotangent per parent,
        shaped like that parent (``None`` allowed for non-differentiable
        parents). Parents that are not Tensors of this tape are ignored."""
        out = Tensor(value, self, self._next())
        self.nodes.append(_Node(out.index, tuple(parents), vjp))
        return out

    def __len__(self):
        return len(self.nodes)


def _dtype_of(value):
    dt = np.asarray(value).dtype
    return dt if dt.kind == "f" else np.float64


def value(x):
    """Underlying numpy value of a Tensor or array-like."""
    return x.data if isinstance(x, Tensor) else x


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Tensor):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ValueError("operands live on different tapes")
    return tape


def _shape(x) -> tuple:
    return np.shape(value(x))


def _check_elementwise(op: str, a, b):
    sa, sb = _shape(a), _shape(b)
    if sa != sb and sa != () and sb != ():
        raise ShapeError(f"shape mismatch in {op}: {sa} vs {sb}")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return np.sum(g) if shape == () else g


# -- elementwise binary ops --------------------------------------------------

def add(a, b):
    _check_elementwise("add", a, b)
    tape = _tape_of(a, b)
    out = value(a) + value(b)
    if tape is None:
        return out
    sa, sb = _shape(a), _shape(b)
    return tape.record(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    _check_elementwise("sub", a, b)
    tape = _tape_of(a, b)
    out = value(a) - value(b)
    if tape is None:
        return out
    sa, sb = _shape(a), _shape(b)
    return tape.record(out, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    _check_elementwise("mul", a, b)
    tape = _tape_of(a, b)
    va, vb = value(a), value(b)
    out = va * vb
    if tape is None:
        return out
    sa, sb = _shape(a), _shape(b)
    return tape.record(out, (a, b),
                       lambda g: (_unbroadcast(g * vb, sa), _unbroadcast(g * va, sb)))


def div(a, b):
    _check_elementwise("div", a, b)
    tape = _tape_of(a, b)
    va, vb = value(a), value(b)
    out = va / vb
    if tape is None:
        return out
    sa, sb = _shape(a), _shape(b)
    return tape.record(out, (a, b),
                       lambda g: (_unbroadcast(g / vb, sa), _unbroadcast(-g * out / vb, sb)))


def neg(a):
    if not isinstance(a, Tensor):
        return -a
    return a.tape.record(-a.data, (a,), lambda g: (-g,))


# -- linear algebra ----------------------------------------------------------

def matmul(a, b):
    va, vb = value(a), value(b)
    sa, sb = np.shape(va), np.shape(vb)
    if len(sa) not in (1, 2) or len(sb) not in (1, 2) or sa[-1] != sb[0]:
        raise ShapeError(f"shape mismatch in matmul: {sa} vs {sb}")
    tape = _tape_of(a, b)
    out = va @ vb
    if tape is None:
        return out

    def vjp(g):
        if va.ndim == 2 and vb.ndim == 2:
            return g @ vb.T, va.T @ g
        if va.ndim == 1 and vb.ndim == 2:
            return vb @ g, np.outer(va, g)
        if va.ndim == 2 and vb.ndim == 1:
            return np.outer(g, vb), va.T @ g
        return g * vb, g * va

    return tape.record(out, (a, b), vjp)


def transpose(a):
    if not isinstance(a, Tensor):
        return np.transpose(a)
    return a.tape.record(a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape):
    if not isinstance(a, Tensor):
        return np.reshape(a, shape)
    old = a.shape
    return a.tape.record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


# -- elementwise unary ops ---------------------------------------------------

def _unary(fn, dfn):
    def op(a):
        if not isinstance(a, Tensor):
            return fn(a)
        out = fn(a.data)
        return a.tape.record(out, (a,), lambda g: (g * dfn(a.data, out),))
    op.__name__ = fn.__name__ if hasattr(fn, "__name__") else "unary"
    return op


def _sigmoid(x):
    # split on sign so that exp never overflows
    x = np.asarray(x)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _softplus(x):
    return np.logaddexp(0.0, x)


exp = _unary(np.exp, lambda x, y: y)
log = _unary(np.log, lambda x, y: 1.0 / x)
tanh = _unary(np.tanh, lambda x, y: 1.0 - y * y)
sigmoid = _unary(_sigmoid, lambda x, y: y * (1.0 - y))
softplus = _unary(_softplus, lambda x, y: _sigmoid(x))
square = _unary(np.square, lambda x, y: 2.0 * x)


def clip(a, lo: float, hi: float):
    """Clip to [lo, hi]; gradient is zero where clipping is active."""
    if not isinstance(a, Tensor):
        return np.clip(a, lo, hi)
    inside = (a.data > lo) & (a.data < hi)
    return a.tape.record(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def clamp_min(a, floor: float):
    if not isinstance(a, Tensor):
        return np.maximum(a, floor)
    above = a.data > floor
    return a.tape.record(np.maximum(a.data, floor), (a,), lambda g: (g * above,))


# -- reductions and structure ------------------------------------------------

def sum(a, axis=None):  # noqa: A001 - mirrors numpy naming
    if not isinstance(a, Tensor):
        return np.sum(a, axis=axis)
    shape = a.shape
    out = np.sum(a.data, axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return a.tape.record(out, (a,), vjp)


def concatenate(xs: Sequence, axis: int = 0):
    xs = list(xs)
    vals = [np.asarray(value(x)) for x in xs]
    for v in vals[1:]:
        rest0 = tuple(np.delete(vals[0].shape, axis))
        if v.ndim != vals[0].ndim or tuple(np.delete(v.shape, axis)) != rest0:
            raise ShapeError(f"shape mismatch in concatenate: {vals[0].shape} vs {v.shape}")
    tape = _tape_of(*xs)
    out = np.concatenate(vals, axis=axis)
    if tape is None:
        return out
    cuts = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return tape.record(out, xs, lambda g: tuple(np.split(g, cuts, axis=axis)))


def take(a, idx):
    """Indexing/slicing (``a[idx]``)."""
    if not isinstance(a, Tensor):
        return a[idx]
    shape, dtype = a.shape, a.data.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return a.tape.record(a.data[idx], (a,), vjp)


# -- reverse pass ------------------------------------------------------------

def backward(tape: Tape, loss: Tensor) -> dict:
    """Gradients of a scalar ``loss`` with respect to every leaf of ``tape``.

    Returns ``{leaf: ndarray}``; leaves the loss does not depend on get zeros.
    Each leaf's ``.grad`` is set as well.
    """
    if not isinstance(loss, Tensor) or loss.tape is not tape:
        raise ValueError("loss must be a Tensor recorded on this tape")
    if loss.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        if node.out > loss.index:
            continue
        g = grads.pop(node.out, None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not isinstance(parent, Tensor) or parent.tape is not tape:
                continue
            prev = grads.get(parent.index)
            grads[parent.index] = pg if prev is None else prev + pg
    result = {}
    for leaf in tape.leaves:
        g = grads.get(leaf.index)
        g = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=leaf.data.dtype).reshape(leaf.shape)
        leaf.grad = g
        result[leaf] = g
    return result


# -- finite-difference oracle ------------------------------------------------

def finite_diff_errors(f: Callable, params: Sequence, eps: float = 1e-5,
                       grads: Sequence | None = None, dtype=None) -> list[np.ndarray]:
    """Per-coordinate relative errors between gradients and central differences.

    ``f(*params)`` must return a scalar; it is called on Tensors to get the
    analytic gradient (unless ``grads`` is supplied) and on plain arrays for
    the perturbed evaluations. ``dtype=np.longdouble`` evaluates the
    perturbed points in extended precision to shrink round-off.
    """
    params = [np.array(p, dtype=np.float64) for p in params]
    if grads is None:
        tape = Tape()
        leaves = [tape.leaf(p) for p in params]
        gmap = backward(tape, f(*leaves))
        grads = [gmap[leaf] for leaf in leaves]
    work = [p.astype(dtype) if dtype is not None else p.copy() for p in params]
    errors = []
    for i, p in enumerate(work):
        err = np.zeros(p.shape)
        g = np.asarray(grads[i], dtype=np.float64)
        flat = p.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = np.asarray(value(f(*work))).reshape(())
            flat[j] = orig - eps
            fm = np.asarray(value(f(*work))).reshape(())
            flat[j] = orig
            # difference taken before rounding back to float64
            fd = float((fp - fm) / (2 * p.dtype.type(eps)))
            err.reshape(-1)[j] = abs(fd - g.reshape(-1)[j]) / (abs(g.reshape(-1)[j]) + 1e-8)
        errors.append(err)
    return errors


def finite_diff_check(f: Callable, params: Sequence, eps: float = 1e-5, **kwargs) -> float:
    """Max relative error of the tape gradient of ``f`` against central differences."""
    errors = finite_diff_errors(f, params, eps, **kwargs)
    return max((float(e.max()) for e in errors if e.size), default=0.0)
