"""Reverse-mode autodiff over numpy arrays, plus forward-mode duals.

Every node on a :class:`Tape` holds a float64 ``ndarray`` (scalars are 0-d
arrays). Operations are recorded in creation order, so reversing the node
list is a valid topological order for the backward sweep.

The module-level functions (``tanh``, ``exp``, ``matmul``, ...) dispatch on
their argument type, so the same model code runs on plain arrays, on tape
variables (:class:`Var`) and on :class:`Dual` numbers. Dual components may
themselves be ``Var`` objects, which is how directional derivatives are made
differentiable with respect to parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when a node value or adjoint is NaN or infinite."""

    def __init__(self, kind: str, phase: str):
        super().__init__(f"non-finite value in {phase} pass at node '{kind}'")
        self.kind = kind
        self.phase = phase


class Tape:
    """Append-only record of operations for one evaluation."""

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Var] = []
        self.check_finite = check_finite

    def leaf(self, value) -> "Var":
        return Var(np.asarray(value, dtype=np.float64), self, "leaf", ())

    def backward(self, output: "Var", seed=None) -> list:
        """Return the list of adjoints, indexed like ``self.nodes``."""
        adj: list = [None] * len(self.nodes)
        adj[output.index] = np.ones_like(output.value) if seed is None else np.asarray(seed, dtype=np.float64)
        for node in reversed(self.nodes[: output.index + 1]):
            g = adj[node.index]
            if g is None or not node.parents:
                continue
            for parent, vjp in node.parents:
                contrib = vjp(g)
                if self.check_finite and not np.all(np.isfinite(contrib)):
                    raise NonFiniteError(node.kind, "backward")
                i = parent.index
                adj[i] = contrib if adj[i] is None else adj[i] + contrib
        return adj


class Var:
    """A node on a tape. Supports numpy-style arithmetic and indexing."""

    __slots__ = ("value", "tape", "index", "kind", "parents")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, value: np.ndarray, tape: Tape, kind: str, parents):
        if tape.check_finite and not np.all(np.isfinite(value)):
            raise NonFiniteError(kind, "forward")
        self.value = value
        self.tape = tape
        self.kind = kind
        self.parents = parents
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return swapaxes(self, -1, -2)

    def __repr__(self):
        return f"Var({self.kind}, shape={self.value.shape})"

    def __len__(self):
        return len(self.value)

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __pow__(self, p):
        if p == 2:
            return square(self)
        raise NotImplementedError("only square is a primitive power")

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


@dataclass
class Dual:
    """Forward-mode dual number: ``primal + eps * tangent``."""

    primal: object
    tangent: object

    __array_ufunc__ = None

    @property
    def shape(self):
        return np.shape(value_of(self.primal))

    @property
    def ndim(self):
        return len(self.shape)

    @property
    def T(self):
        return swapaxes(self, -1, -2)

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return Dual(getitem(self.primal, idx), getitem(self.tangent, idx))

    def __pow__(self, p):
        if p == 2:
            return square(self)
        raise NotImplementedError("only square is a primitive power")

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def value_of(x) -> np.ndarray:
    """Strip tape and dual wrappers, returning the primal array."""
    while True:
        if isinstance(x, Var):
            return x.value
        if isinstance(x, Dual):
            x = x.primal
            continue
        return np.asarray(x, dtype=np.float64)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _tape_of(*args) -> Tape | None:
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ValueError("operands belong to different tapes")
    return tape


def _node(tape: Tape, value, kind: str, parents) -> Var:
    return Var(value, tape, kind, tuple((p, f) for p, f in parents if isinstance(p, Var)))


# --------------------------------------------------------------------------
# binary primitives


def add(a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        a, b = _dual(a), _dual(b)
        return Dual(add(a.primal, b.primal), add(a.tangent, b.tangent))
    tape = _tape_of(a, b)
    if tape is None:
        return np.add(a, b)
    av, bv = value_of(a), value_of(b)
    return _node(tape, av + bv, "add", [
        (a, lambda g: _unbroadcast(g, av.shape)),
        (b, lambda g: _unbroadcast(g, bv.shape)),
    ])


def sub(a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        a, b = _dual(a), _dual(b)
        return Dual(sub(a.primal, b.primal), sub(a.tangent, b.tangent))
    tape = _tape_of(a, b)
    if tape is None:
        return np.subtract(a, b)
    av, bv = value_of(a), value_of(b)
    return _node(tape, av - bv, "sub", [
        (a, lambda g: _unbroadcast(g, av.shape)),
        (b, lambda g: _unbroadcast(-g, bv.shape)),
    ])


def mul(a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        a, b = _dual(a), _dual(b)
        return Dual(mul(a.primal, b.primal),
                    add(mul(a.tangent, b.primal), mul(a.primal, b.tangent)))
    tape = _tape_of(a, b)
    if tape is None:
        return np.multiply(a, b)
    av, bv = value_of(a), value_of(b)
    return _node(tape, av * bv, "mul", [
        (a, lambda g: _unbroadcast(g * bv, av.shape)),
        (b, lambda g: _unbroadcast(g * av, bv.shape)),
    ])


def div(a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        a, b = _dual(a), _dual(b)
        q = div(a.primal, b.primal)
        return Dual(q, div(sub(a.tangent, mul(q, b.tangent)), b.primal))
    tape = _tape_of(a, b)
    if tape is None:
        return np.divide(a, b)
    av, bv = value_of(a), value_of(b)
    out = av / bv
    return _node(tape, out, "div", [
        (a, lambda g: _unbroadcast(g / bv, av.shape)),
        (b, lambda g: _unbroadcast(-g * out / bv, bv.shape)),
    ])


def matmul(a, b):
    """Batched matrix product with numpy broadcasting (``@``)."""
    if isinstance(a, Dual) or isinstance(b, Dual):
        a, b = _dual(a), _dual(b)
        return Dual(matmul(a.primal, b.primal),
                    add(matmul(a.tangent, b.primal), matmul(a.primal, b.tangent)))
    tape = _tape_of(a, b)
    if tape is None:
        return np.matmul(a, b)
    av, bv = value_of(a), value_of(b)

    def grad_a(g):
        if bv.ndim == 1:
            ga = np.multiply.outer(g, bv) if av.ndim > 1 else g * bv
        elif av.ndim == 1:
            ga = np.matmul(bv, g[..., None])[..., 0]
        else:
            ga = np.matmul(g, np.swapaxes(bv, -1, -2))
        return _unbroadcast(ga, av.shape)

    def grad_b(g):
        if av.ndim == 1:
            gb = np.multiply.outer(av, g) if bv.ndim > 1 else g * av
        elif bv.ndim == 1:
            gb = np.matmul(np.swapaxes(av, -1, -2), g[..., None])[..., 0]
        else:
            gb = np.matmul(np.swapaxes(av, -1, -2), g)
        return _unbroadcast(gb, bv.shape)

    return _node(tape, np.matmul(av, bv), "matmul", [(a, grad_a), (b, grad_b)])


def dot(a, b):
    """Inner product over the last axis."""
    return sum_(mul(a, b), axis=-1)


def logaddexp(a, b):
    """Stable ``log(exp(a) + exp(b))``."""
    if isinstance(a, Dual) or isinstance(b, Dual):
        a, b = _dual(a), _dual(b)
        out = logaddexp(a.primal, b.primal)
        wa = exp(sub(a.primal, out))
        wb = exp(sub(b.primal, out))
        return Dual(out, add(mul(wa, a.tangent), mul(wb, b.tangent)))
    tape = _tape_of(a, b)
    if tape is None:
        return np.logaddexp(a, b)
    av, bv = value_of(a), value_of(b)
    out = np.logaddexp(av, bv)
    return _node(tape, out, "logaddexp", [
        (a, lambda g: _unbroadcast(g * np.exp(av - out), av.shape)),
        (b, lambda g: _unbroadcast(g * np.exp(bv - out), bv.shape)),
    ])


def _dual(x) -> Dual:
    if isinstance(x, Dual):
        return x
    return Dual(x, np.zeros_like(value_of(x)))


# --------------------------------------------------------------------------
# unary primitives


def _unary(x, kind, fwd, dfwd):
    """``dfwd(x_value, out_value)`` is the elementwise derivative."""
    if isinstance(x, Dual):
        out = _unary(x.primal, kind, fwd, dfwd)
        return Dual(out, mul(_unary_deriv(x.primal, out, kind, dfwd), x.tangent))
    if isinstance(x, Var):
        xv = x.value
        out = fwd(xv)
        return _node(x.tape, out, kind, [(x, lambda g: g * dfwd(xv, out))])
    return fwd(np.asarray(x, dtype=np.float64))


def _unary_deriv(x, out, kind, dfwd):
    # derivative as an expression, so it stays on the tape when x is a Var
    if kind == "tanh":
        return sub(1.0, square(out))
    if kind == "exp":
        return out
    if kind == "log":
        return div(1.0, x)
    if kind == "square":
        return mul(2.0, x)
    if kind == "sqrt":
        return div(0.5, out)
    if kind == "sigmoid":
        return mul(out, sub(1.0, out))
    if kind == "softplus":
        return sigmoid(x)
    if kind == "neg":
        return -1.0
    if kind == "lgamma":
        return digamma(x)
    if kind == "abs":
        return np.sign(value_of(x))
    return dfwd(value_of(x), value_of(out))


def neg(x):
    return _unary(x, "neg", np.negative, lambda x, y: -1.0)


def tanh(x):
    return _unary(x, "tanh", np.tanh, lambda x, y: 1.0 - y * y)


def exp(x):
    return _unary(x, "exp", np.exp, lambda x, y: y)


def log(x):
    return _unary(x, "log", np.log, lambda x, y: 1.0 / x)


def square(x):
    return _unary(x, "square", np.square, lambda x, y: 2.0 * x)


def sqrt(x):
    # subgradient 0 at the origin so norms of exactly-zero residuals stay finite
    def d(x, y):
        with np.errstate(divide="ignore"):
            return np.where(y > 0, 0.5 / np.where(y > 0, y, 1.0), 0.0)
    return _unary(x, "sqrt", np.sqrt, d)


def abs_(x):
    return _unary(x, "abs", np.abs, lambda x, y: np.sign(x))


def _np_sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def sigmoid(x):
    return _unary(x, "sigmoid", _np_sigmoid, lambda x, y: y * _np_sigmoid(-x))


def softplus(x):
    """``log(1 + exp(x))`` without overflow."""
    return _unary(x, "softplus", lambda x: np.logaddexp(0.0, x), lambda x, y: _np_sigmoid(x))


def lgamma(x):
    """Log-gamma for positive arguments (Lanczos, see :func:`lanczos_lgamma`)."""
    return _unary(x, "lgamma", lanczos_lgamma, lambda x, y: lanczos_digamma(x))


def digamma(x):
    if isinstance(x, (Var, Dual)):
        raise NotImplementedError("digamma is not differentiable here")
    return lanczos_digamma(np.asarray(x, dtype=np.float64))


# Lanczos approximation, g = 7 with 9 coefficients.
_LANCZOS_G = 7.0
_LANCZOS_COEF = np.array([
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
])
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


def _lanczos_series(y):
    """Series ``c0 + sum c_i / (y + i - 1)`` and its derivative, for ``y >= 1``."""
    s = np.full_like(y, _LANCZOS_COEF[0])
    ds = np.zeros_like(y)
    for i in range(1, 9):
        r = 1.0 / (y + (i - 1))
        s = s + _LANCZOS_COEF[i] * r
        ds = ds - _LANCZOS_COEF[i] * r * r
    return s, ds


def lanczos_lgamma(x) -> np.ndarray:
    """log Gamma(x) for x > 0, via lgamma(x) = lgamma(x + 1) - log(x)."""
    x = np.asarray(x, dtype=np.float64)
    y = x + 1.0
    s, _ = _lanczos_series(y)
    t = y + _LANCZOS_G - 0.5
    with np.errstate(divide="ignore", invalid="ignore"):
        return _HALF_LOG_2PI + (y - 0.5) * np.log(t) - t + np.log(s) - np.log(x)


def lanczos_digamma(x) -> np.ndarray:
    """Exact derivative of :func:`lanczos_lgamma`."""
    x = np.asarray(x, dtype=np.float64)
    y = x + 1.0
    s, ds = _lanczos_series(y)
    t = y + _LANCZOS_G - 0.5
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(t) + (y - 0.5) / t - 1.0 + ds / s - 1.0 / x


# --------------------------------------------------------------------------
# reductions and structural ops


def sum_(x, axis=None):
    if isinstance(x, Dual):
        return Dual(sum_(x.primal, axis), sum_(x.tangent, axis))
    if not isinstance(x, Var):
        return np.sum(x, axis=axis)
    xv = x.value

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, xv.shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis), xv.shape).copy()

    return _node(x.tape, np.asarray(np.sum(xv, axis=axis)), "sum", [(x, vjp)])


def mean(x, axis=None):
    n = value_of(x).size if axis is None else value_of(x).shape[axis]
    return mul(sum_(x, axis), 1.0 / n)


def reshape(x, shape):
    if isinstance(x, Dual):
        return Dual(reshape(x.primal, shape), reshape(x.tangent, shape))
    if not isinstance(x, Var):
        return np.reshape(x, shape)
    old = x.value.shape
    return _node(x.tape, x.value.reshape(shape), "reshape", [(x, lambda g: g.reshape(old))])


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(i is None or i is Ellipsis or isinstance(i, (int, slice, np.integer)) for i in items)


def getitem(x, idx):
    if isinstance(x, Dual):
        return x[idx]
    if not isinstance(x, Var):
        return np.asarray(x)[idx]
    xv = x.value
    basic = _is_basic_index(idx)

    def vjp(g):
        full = np.zeros_like(xv)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return full

    return _node(x.tape, np.asarray(xv[idx]), "getitem", [(x, vjp)])


def swapaxes(x, a1, a2):
    if isinstance(x, Dual):
        return Dual(swapaxes(x.primal, a1, a2), swapaxes(x.tangent, a1, a2))
    if not isinstance(x, Var):
        return np.swapaxes(x, a1, a2)
    return _node(x.tape, np.swapaxes(x.value, a1, a2), "swapaxes",
                 [(x, lambda g: np.swapaxes(g, a1, a2))])


def concat(xs: Sequence, axis: int = -1):
    if any(isinstance(x, Dual) for x in xs):
        ds = [_dual(x) for x in xs]
        return Dual(concat([d.primal for d in ds], axis), concat([d.tangent for d in ds], axis))
    tape = _tape_of(*xs)
    vals = [value_of(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    if tape is None:
        return out
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    parents = []
    for k, x in enumerate(xs):
        def vjp(g, k=k):
            return np.split(g, bounds, axis=axis)[k]
        parents.append((x, vjp))
    return _node(tape, out, "concat", parents)


def trace(x):
    """Trace over the last two axes."""
    if isinstance(x, Dual):
        return Dual(trace(x.primal), trace(x.tangent))
    if not isinstance(x, Var):
        return np.trace(x, axis1=-2, axis2=-1)
    xv = x.value
    eye = np.eye(xv.shape[-1])
    return _node(x.tape, np.trace(xv, axis1=-2, axis2=-1), "trace",
                 [(x, lambda g: np.asarray(g)[..., None, None] * eye)])


def logabsdet(x):
    """log|det| over the last two axes (LAPACK LU via ``slogdet``)."""
    if isinstance(x, Dual):
        raise NotImplementedError("logabsdet has no forward-mode rule")
    xv = value_of(x)
    sign, out = np.linalg.slogdet(xv)
    if np.any(sign == 0):
        raise np.linalg.LinAlgError("singular matrix in logabsdet")
    if not isinstance(x, Var):
        return out

    def vjp(g):
        return np.asarray(g)[..., None, None] * np.swapaxes(np.linalg.inv(xv), -1, -2)

    return _node(x.tape, out, "logabsdet", [(x, vjp)])


# --------------------------------------------------------------------------
# drivers


def value_and_grad(f: Callable, x, has_aux: bool = False, check_finite: bool = True):
    """Evaluate ``f(x)`` on a fresh tape and return ``(value, df/dx)``.

    With ``has_aux`` the function returns ``(scalar, aux)`` and the result is
    ``((value, aux), grad)``; aux entries that are ``Var`` are unwrapped.
    """
    x = np.asarray(x, dtype=np.float64)
    tape = Tape(check_finite=check_finite)
    leaf = tape.leaf(x)
    out = f(leaf)
    aux = None
    if has_aux:
        out, aux = out
        aux = _unwrap(aux)
    if not isinstance(out, Var):
        val = float(np.asarray(out))
        g = np.zeros_like(x)
    else:
        if out.value.ndim != 0:
            raise ValueError(f"grad needs a scalar output, got shape {out.value.shape}")
        val = float(out.value)
        adj = tape.backward(out)[leaf.index]
        g = np.zeros_like(x) if adj is None else adj
    return ((val, aux) if has_aux else val), g


def _unwrap(aux):
    if isinstance(aux, dict):
        return {k: _unwrap(v) for k, v in aux.items()}
    if isinstance(aux, (list, tuple)):
        return type(aux)(_unwrap(v) for v in aux)
    if isinstance(aux, Var):
        return aux.value
    return aux


def grad(f: Callable, x, check_finite: bool = True) -> np.ndarray:
    """Gradient of a scalar-valued ``f`` at ``x``."""
    return value_and_grad(f, x, check_finite=check_finite)[1]


def jvp(g: Callable, z, w) -> np.ndarray:
    """Directional derivative ``J_g(z) @ w`` by forward-mode duals."""
    z = np.asarray(z, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if z.shape != w.shape:
        raise ValueError(f"direction shape {w.shape} does not match point shape {z.shape}")
    out = g(Dual(z, w))
    if not isinstance(out, Dual):
        return np.zeros_like(value_of(out))
    return value_of(out.tangent)


@dataclass(frozen=True)
class Layout:
    """Maps a list of named array shapes onto one flat parameter vector."""

    shapes: tuple

    @property
    def size(self) -> int:
        return int(sum(int(np.prod(s)) for s in self.shapes))

    @property
    def offsets(self) -> list[int]:
        out, o = [], 0
        for s in self.shapes:
            out.append(o)
            o += int(np.prod(s))
        return out

    def unflatten(self, flat) -> list:
        """Split ``flat`` (array or ``Var``) into arrays of the stored shapes."""
        if value_of(flat).shape != (self.size,):
            raise ValueError(f"expected flat vector of length {self.size}, got {value_of(flat).shape}")
        parts = []
        for off, s in zip(self.offsets, self.shapes):
            n = int(np.prod(s))
            parts.append(reshape(getitem(flat, slice(off, off + n)), s))
        return parts

    def flatten(self, arrays: Sequence[np.ndarray]) -> np.ndarray:
        if len(arrays) != len(self.shapes):
            raise ValueError("wrong number of arrays for layout")
        for a, s in zip(arrays, self.shapes):
            if np.shape(a) != tuple(s):
                raise ValueError(f"array shape {np.shape(a)} does not match layout {s}")
        return np.concatenate([np.ravel(np.asarray(a, dtype=np.float64)) for a in arrays]) \
            if arrays else np.zeros(0)

    def index(self, entry: int, *pos: int) -> int:
        """Flat index of element ``pos`` in array ``entry``."""
        return self.offsets[entry] + int(np.ravel_multi_index(pos, self.shapes[entry])) if pos \
            else self.offsets[entry]
