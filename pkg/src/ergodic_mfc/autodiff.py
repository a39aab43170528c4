"""Array-valued reverse-mode differentiation on an explicit tape.

A :class:`Tape` records every operation applied to its :class:`Var` objects
in creation order (a Wengert list).  :meth:`Tape.gradient` sweeps the list
backwards and accumulates adjoints.  Values are numpy arrays, so a single
node can represent a whole Monte Carlo batch.

Only smooth operations are registered.  Applying anything else to a ``Var``
(an unregistered ufunc, a comparison, ``bool()``) raises
:class:`NonDifferentiableError` immediately, i.e. at record time.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class NonDifferentiableError(TypeError):
    """Raised when a non-differentiable operation is applied to a Var."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tape:
    """Records operations on :class:`Var` objects for a reverse sweep."""

    def __init__(self):
        self._vjps: list[tuple[tuple, Callable | None]] = []

    def __len__(self):
        return len(self._vjps)

    def variable(self, value) -> "Var":
        """Register a leaf (an independent variable)."""
        return self._record(np.array(value, dtype=float), (), None)

    def _record(self, value, parents: tuple, vjp) -> "Var":
        var = Var(value, self, len(self._vjps))
        self._vjps.append((parents, vjp))
        return var

    def record(self, value, parents: Sequence["Var"], vjp: Callable) -> "Var":
        """Record a custom primitive.

        ``vjp(cotangent)`` must return one array per parent, shaped like
        that parent's value (``None`` for no contribution).
        """
        for p in parents:
            if p.tape is not self:
                raise ValueError("parent belongs to a different tape")
        return self._record(np.asarray(value, dtype=float), tuple(parents), vjp)

    def gradient(self, output: "Var", wrt):
        """Derivative of the scalar ``output`` with respect to ``wrt``.

        ``wrt`` is a Var or a sequence of Vars; arrays of zeros are returned
        for variables the output does not depend on.
        """
        if output.tape is not self:
            raise ValueError("output belongs to a different tape")
        if output.value.size != 1:
            raise ValueError("gradient() needs a scalar output")
        adj: dict[int, np.ndarray] = {output.index: np.ones_like(output.value)}
        for i in range(output.index, -1, -1):
            g = adj.pop(i, None)
            if g is None:
                continue
            parents, vjp = self._vjps[i]
            if vjp is None:
                adj[i] = g  # leaf: keep for lookup
                continue
            contribs = vjp(g)
            for p, c in zip(parents, contribs):
                if c is None:
                    continue
                if p.index in adj:
                    adj[p.index] = adj[p.index] + c
                else:
                    adj[p.index] = c
        single = isinstance(wrt, Var)
        targets = [wrt] if single else list(wrt)
        out = [adj.get(v.index, np.zeros_like(v.value)) for v in targets]
        return out[0] if single else out


def _val(x):
    return x.value if isinstance(x, Var) else x


def _unary(x: "Var", value, dfdx) -> "Var":
    return x.tape._record(value, (x,), lambda g: (g * dfdx,))


def _binary(a, b, value, da: Callable, db: Callable) -> "Var":
    tape = a.tape if isinstance(a, Var) else b.tape
    parents, fns = [], []
    if isinstance(a, Var):
        parents.append(a)
        fns.append((da, a.value.shape))
    if isinstance(b, Var):
        if isinstance(a, Var) and a.tape is not b.tape:
            raise ValueError("operands live on different tapes")
        parents.append(b)
        fns.append((db, b.value.shape))

    def vjp(g):
        return tuple(_unbroadcast(f(g), shape) for f, shape in fns)

    return tape._record(value, tuple(parents), vjp)


def add(a, b):
    return _binary(a, b, _val(a) + _val(b), lambda g: g, lambda g: g)


def sub(a, b):
    return _binary(a, b, _val(a) - _val(b), lambda g: g, lambda g: -g)


def mul(a, b):
    av, bv = _val(a), _val(b)
    return _binary(a, b, av * bv, lambda g: g * bv, lambda g: g * av)


def div(a, b):
    av, bv = _val(a), _val(b)
    out = av / bv
    return _binary(a, b, out, lambda g: g / bv, lambda g: -g * out / bv)


def power(a, b):
    if isinstance(b, Var):
        raise NonDifferentiableError("only constant exponents are supported")
    av = _val(a)
    return _unary(a, av**b, b * av ** (b - 1))


def exp(x):
    if not isinstance(x, Var):
        return np.exp(x)
    out = np.exp(x.value)
    return _unary(x, out, out)


def log(x):
    if not isinstance(x, Var):
        return np.log(x)
    return _unary(x, np.log(x.value), 1.0 / x.value)


def sin(x):
    if not isinstance(x, Var):
        return np.sin(x)
    return _unary(x, np.sin(x.value), np.cos(x.value))


def cos(x):
    if not isinstance(x, Var):
        return np.cos(x)
    return _unary(x, np.cos(x.value), -np.sin(x.value))


def tanh(x):
    if not isinstance(x, Var):
        return np.tanh(x)
    t = np.tanh(x.value)
    return _unary(x, t, 1.0 - t * t)


def sqrt(x):
    """Square root; the derivative at 0 is taken as 0 (a subgradient of the RMS)."""
    if not isinstance(x, Var):
        return np.sqrt(x)
    s = np.sqrt(x.value)
    with np.errstate(divide="ignore"):
        d = np.where(s > 0, 0.5 / s, 0.0)
    return _unary(x, s, d)


def square(x):
    if not isinstance(x, Var):
        return np.square(x)
    return _unary(x, x.value * x.value, 2.0 * x.value)


def absolute(x):
    """|x| with the sign subgradient (0 at the kink)."""
    if not isinstance(x, Var):
        return np.abs(x)
    return _unary(x, np.abs(x.value), np.sign(x.value))


def clamp(x, lo: float, hi: float):
    """Clip to [lo, hi]; the derivative is 0 where clipping is active."""
    if not isinstance(x, Var):
        return np.clip(x, lo, hi)
    inside = (x.value >= lo) & (x.value <= hi)
    return _unary(x, np.clip(x.value, lo, hi), inside.astype(float))


def vsum(x, axis=None):
    if not isinstance(x, Var):
        return np.sum(x, axis=axis)
    shape = x.value.shape
    out = x.value.sum(axis=axis)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return x.tape._record(np.asarray(out), (x,), vjp)


def mean(x, axis=None):
    if not isinstance(x, Var):
        return np.mean(x, axis=axis)
    n = x.value.size if axis is None else x.value.shape[axis]
    return vsum(x, axis) * (1.0 / n)


def reshape(x, shape):
    if not isinstance(x, Var):
        return np.reshape(x, shape)
    old = x.value.shape
    return x.tape._record(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def getitem(x: "Var", idx):
    shape = x.value.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return x.tape._record(np.asarray(x.value[idx]), (x,), vjp)


def stack(items: Sequence, axis: int = 0):
    """Stack Vars (and arrays) along a new axis."""
    vars_ = [v for v in items if isinstance(v, Var)]
    if not vars_:
        return np.stack(items, axis=axis)
    tape = vars_[0].tape
    value = np.stack([_val(v) for v in items], axis=axis)
    positions = [i for i, v in enumerate(items) if isinstance(v, Var)]

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in positions)

    return tape._record(value, tuple(vars_), vjp)


_UFUNCS = {
    np.add: add,
    np.subtract: sub,
    np.multiply: mul,
    np.divide: div,
    np.true_divide: div,
    np.power: power,
    np.exp: exp,
    np.log: log,
    np.sin: sin,
    np.cos: cos,
    np.tanh: tanh,
    np.sqrt: sqrt,
    np.square: square,
    np.absolute: absolute,
    np.negative: lambda x: mul(x, -1.0),
    np.positive: lambda x: x,
}


class Var:
    """A node on a :class:`Tape` holding a numpy value."""

    __slots__ = ("value", "tape", "index")
    __array_priority__ = 1000

    def __init__(self, value, tape: Tape, index: int):
        self.value = value
        self.tape = tape
        self.index = index

    def __repr__(self):
        return f"Var(shape={self.value.shape}, index={self.index})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __len__(self):
        return len(self.value)

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pos__(self):
        return self

    def __pow__(self, e):
        return power(self, e)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None):
        return vsum(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def mean(self, axis=None):
        return mean(self, axis)

    def _reject(self, *_):
        raise NonDifferentiableError("comparisons are not differentiable")

    __lt__ = __le__ = __gt__ = __ge__ = _reject
    __eq__ = __ne__ = _reject  # type: ignore[assignment]
    __hash__ = object.__hash__

    def __bool__(self):
        raise NonDifferentiableError("truth value of a Var is not differentiable")

    def __float__(self):
        raise NonDifferentiableError("use .value to leave the tape explicitly")

    def __array__(self, *args, **kwargs):
        raise NonDifferentiableError("use .value to leave the tape explicitly")

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        if method != "__call__" or kwargs or ufunc not in _UFUNCS:
            raise NonDifferentiableError(f"{ufunc.__name__} is not a registered smooth op")
        return _UFUNCS[ufunc](*inputs)

    def __array_function__(self, func, types, args, kwargs):
        table = {np.sum: vsum, np.mean: mean, np.stack: stack}
        if func not in table:
            raise NonDifferentiableError(f"{func.__name__} is not a registered smooth op")
        return table[func](*args, **kwargs)
