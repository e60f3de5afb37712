"""Reverse-mode differentiation over a small, fixed vocabulary of primitives.

Every primitive accepts plain arrays as well as :class:`Var` nodes. When no
argument is a ``Var`` the primitive simply returns a numpy array, so model
code written against these functions runs unchanged with or without a tape.

Example::

    tape = Tape()
    w = tape.param("w", np.array([1.0, 2.0]))
    loss = ops.sum(ops.mul(w, w))
    gradient_of(tape, loss)["w"]   # -> array([2., 4.])
"""
from __future__ import annotations

from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import ArgumentError
from . import numerics


class Var:
    """A value recorded on a :class:`Tape`."""

    __slots__ = ("value", "tape", "index")
    __array_priority__ = 100.0

    def __init__(self, value, tape, index):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(#{self.index}, shape={self.value.shape})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)


class _Record:
    __slots__ = ("kind", "args", "out", "fwd", "vjp", "arg_values")

    def __init__(self, kind, args, out, fwd, vjp, arg_values):
        self.kind = kind
        self.args = args            # node index for Var args, None for constants
        self.out = out
        self.fwd = fwd
        self.vjp = vjp
        self.arg_values = arg_values


class Tape:
    """Ordered record of primitive applications plus a parameter registry.

    A tape is single-use: build one per loss evaluation.
    """

    def __init__(self):
        self._values: List[np.ndarray] = []
        self._records: List[_Record] = []
        self._params: Dict[str, int] = {}

    def _new_node(self, value):
        self._values.append(value)
        return Var(value, self, len(self._values) - 1)

    def param(self, name: str, value) -> Var:
        """Register a trainable leaf. Re-registering a name returns the same node."""
        if name in self._params:
            idx = self._params[name]
            return Var(self._values[idx], self, idx)
        var = self._new_node(np.asarray(value, dtype=np.float64))
        self._params[name] = var.index
        return var

    def constant(self, value) -> Var:
        return self._new_node(np.asarray(value, dtype=np.float64))

    @property
    def param_names(self) -> List[str]:
        return list(self._params)

    @property
    def records(self) -> List[Tuple[str, Tuple, int]]:
        return [(r.kind, r.args, r.out) for r in self._records]

    def _record(self, kind, args, vals, out, fwd, vjp):
        node = self._new_node(out)
        ids = tuple(a.index if isinstance(a, Var) else None for a in args)
        self._records.append(_Record(kind, ids, node.index, fwd, vjp, vals))
        return node

    def replay(self) -> List[np.ndarray]:
        """Recompute every recorded value from the leaves."""
        values = list(self._values)
        for r in self._records:
            vals = [values[i] if i is not None else v for i, v in zip(r.args, r.arg_values)]
            values[r.out] = r.fwd(*vals)
        return values

    def gradient(self, loss: Var) -> Dict[str, np.ndarray]:
        if not isinstance(loss, Var) or loss.tape is not self:
            raise ArgumentError("loss is not a node of this tape")
        if loss.value.size != 1:
            raise ArgumentError(f"loss must be scalar, got shape {loss.value.shape}")
        adj: List[Optional[np.ndarray]] = [None] * len(self._values)
        adj[loss.index] = np.ones_like(self._values[loss.index])
        for r in reversed(self._records):
            if r.out > loss.index:
                continue
            g = adj[r.out]
            if g is None:
                continue
            grads = r.vjp(g, self._values[r.out], *r.arg_values)
            for i, gi in zip(r.args, grads):
                if i is None or gi is None:
                    continue
                adj[i] = gi if adj[i] is None else adj[i] + gi
        out = {}
        for name, idx in self._params.items():
            g = adj[idx]
            out[name] = np.zeros_like(self._values[idx]) if g is None else np.asarray(g, dtype=np.float64)
        return out


def gradient_of(tape: Tape, loss: Var) -> Dict[str, np.ndarray]:
    """d(loss)/d(param) for every parameter registered on ``tape``."""
    return tape.gradient(loss)


# --------------------------------------------------------------------------
# primitive machinery

def _tape_of(args) -> Optional[Tape]:
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ArgumentError("operands belong to different tapes")
    return tape


def _value(a):
    if isinstance(a, Var):
        return a.value
    return np.asarray(a, dtype=np.float64)


def _apply(kind: str, fwd: Callable, vjp: Callable, *args):
    tape = _tape_of(args)
    vals = [_value(a) for a in args]
    out = fwd(*vals)
    if tape is None:
        return out
    return tape._record(kind, args, vals, out, fwd, vjp)


def value(a) -> np.ndarray:
    """Underlying array of a Var or array-like."""
    return _value(a)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --------------------------------------------------------------------------
# primitives

def add(a, b):
    return _apply("add", np.add,
                  lambda g, out, x, y: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)),
                  a, b)


def sub(a, b):
    return _apply("sub", np.subtract,
                  lambda g, out, x, y: (_unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)),
                  a, b)


def neg(a):
    return _apply("neg", np.negative, lambda g, out, x: (-g,), a)


def mul(a, b):
    return _apply("mul", np.multiply,
                  lambda g, out, x, y: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)),
                  a, b)


def matmul(a, b):
    """Product of 2-D operands."""
    def fwd(x, y):
        if x.ndim != 2 or y.ndim != 2:
            raise ArgumentError("matmul expects 2-D operands")
        return x @ y
    return _apply("matmul", fwd, lambda g, out, x, y: (g @ y.T, x.T @ g), a, b)


def affine(x, weight, bias):
    """``x @ weight.T + bias`` for a batch ``x`` of shape (n, in)."""
    def fwd(xv, w, b):
        if xv.shape[-1] != w.shape[1]:
            raise ArgumentError(f"affine width mismatch: input {xv.shape[-1]} vs weight {w.shape}")
        return xv @ w.T + b

    def vjp(g, out, xv, w, b):
        return g @ w, g.T @ xv, _unbroadcast(g, b.shape)
    return _apply("affine", fwd, vjp, x, weight, bias)


def tanh(a):
    return _apply("tanh", np.tanh, lambda g, out, x: (g * (1.0 - out * out),), a)


def exp(a):
    return _apply("exp", np.exp, lambda g, out, x: (g * out,), a)


def log(a):
    return _apply("log", np.log, lambda g, out, x: (g / x,), a)


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    def fwd(x):
        return np.sum(x, axis=axis, keepdims=keepdims)

    def vjp(g, out, x):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return _apply("sum", fwd, vjp, a)


def logsumexp(a, axis=None, keepdims=False):
    def fwd(x):
        out = numerics.logsumexp(x, axis=axis, keepdims=keepdims)
        return np.asarray(out, dtype=np.float64)

    def vjp(g, out, x):
        if axis is None:
            return (g * np.exp(x - out),)
        if not keepdims:
            g = np.expand_dims(g, axis)
            out = np.expand_dims(out, axis)
        return (g * np.exp(x - out),)
    return _apply("logsumexp", fwd, vjp, a)


def logmeanexp(a, axis=0):
    """log(mean(exp(a))) along ``axis``; exact when all entries are equal."""
    def fwd(x):
        m = np.max(x, axis=axis, keepdims=True)
        out = np.log(np.mean(np.exp(x - m), axis=axis, keepdims=True)) + m
        return np.squeeze(out, axis=axis)

    def vjp(g, out, x):
        g, out = np.expand_dims(g, axis), np.expand_dims(out, axis)
        return (g * np.exp(x - out) / x.shape[axis],)
    return _apply("logmeanexp", fwd, vjp, a)


def take(a, indices, axis=-1):
    """Select ``indices`` along ``axis`` (a slice generalised to index arrays)."""
    idx = np.asarray(indices, dtype=np.intp)

    def fwd(x):
        return np.take(x, idx, axis=axis)

    def vjp(g, out, x):
        gx = np.zeros_like(x)
        ax = axis % x.ndim
        sel = [slice(None)] * x.ndim
        sel[ax] = idx
        np.add.at(gx, tuple(sel), g)
        return (gx,)
    return _apply("take", fwd, vjp, a)


def concat(parts: Sequence, axis=-1):
    def fwd(*xs):
        return np.concatenate(xs, axis=axis)

    def vjp(g, out, *xs):
        cuts = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return tuple(np.split(g, cuts, axis=axis))
    return _apply("concat", fwd, vjp, *parts)


def reshape(a, shape):
    return _apply("reshape", lambda x: np.reshape(x, shape),
                  lambda g, out, x: (np.reshape(g, x.shape),), a)


def transpose(a):
    return _apply("transpose", lambda x: np.ascontiguousarray(x.T),
                  lambda g, out, x: (g.T,), a)


def logdet(a):
    """log|det a| of a square matrix (sign discarded)."""
    def fwd(x):
        return np.asarray(numerics.logdet_lu(x)[0])
    return _apply("logdet", fwd, lambda g, out, x: (g * np.linalg.inv(x).T,), a)


def inv(a):
    def vjp(g, out, x):
        return (-(out.T @ g @ out.T),)
    return _apply("inv", np.linalg.inv, vjp, a)


PRIMITIVES = ("add", "sub", "neg", "mul", "matmul", "affine", "tanh", "exp", "log",
              "sum", "logsumexp", "logmeanexp", "take", "concat", "reshape", "transpose", "logdet", "inv")
