"""DualTape: array-valued reverse-mode differentiation.

Every operation on a Var appends one node to its tape (value plus the
vector-Jacobian product for each Var parent). Node indices are assigned
in creation order, so walking them backwards is a reverse topological
order; gradient() visits each node at most once.

The op functions also accept plain arrays. When no argument is a Var they
compute the plain numpy result and record nothing, which lets the field
forward pass run unchanged with or without a tape.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.special import expit

from cnerf.errors import ContractError

ArrayLike = Union["Var", np.ndarray, float, int]
Vjp = Callable[[np.ndarray], np.ndarray]


class Var:
    """Handle to a recorded value."""

    __slots__ = ("tape", "index", "value")

    def __init__(self, tape: DualTape, index: int, value: np.ndarray):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __len__(self) -> int:
        return len(self.value)

    def __repr__(self) -> str:
        return f"Var(#{self.index}, shape={self.value.shape})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __getitem__(self, key): return index(self, key)

    def reshape(self, *shape) -> Var:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> Var:
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None) -> Var:
        return mean(self, axis=axis)


class DualTape:
    """Records a computation; gradient() runs the reverse sweep."""

    def __init__(self):
        self._values: list[np.ndarray] = []
        self._parents: list[tuple[tuple[int, Vjp], ...]] = []

    def __len__(self) -> int:
        return len(self._values)

    def variable(self, value) -> Var:
        """Register a leaf (a parameter to differentiate with respect to)."""
        return self._record(np.array(value, dtype=np.float64), ())

    def _record(self, value: np.ndarray, parents: Sequence[tuple[int, Vjp]]) -> Var:
        idx = len(self._values)
        self._values.append(value)
        self._parents.append(tuple(parents))
        return Var(self, idx, value)

    def gradient(self, root: Var, wrt: Sequence[Var]) -> list[np.ndarray]:
        """d(root)/d(w) for every w in wrt; root must be a scalar on this tape."""
        if not isinstance(root, Var) or root.tape is not self:
            raise ContractError("gradient root must be a Var recorded on this tape")
        if root.value.size != 1 or root.value.ndim > 1:
            raise ContractError(f"gradient root must be scalar, got shape {root.value.shape}")
        for w in wrt:
            if not isinstance(w, Var) or w.tape is not self:
                raise ContractError("gradient targets must be Vars recorded on this tape")

        adjoints: list[Optional[np.ndarray]] = [None] * (root.index + 1)
        adjoints[root.index] = np.ones_like(root.value)
        for i in range(root.index, -1, -1):
            g = adjoints[i]
            if g is None:
                continue
            for parent, vjp in self._parents[i]:
                contrib = _unbroadcast(vjp(g), self._values[parent].shape)
                if adjoints[parent] is None:
                    adjoints[parent] = contrib
                else:
                    adjoints[parent] = adjoints[parent] + contrib

        grads = []
        for w in wrt:
            g = adjoints[w.index] if w.index <= root.index else None
            grads.append(np.zeros_like(w.value) if g is None else np.array(g, dtype=np.float64))
        return grads


# ============================================================================
# Helpers
# ============================================================================


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast adjoint back down to `shape`."""
    grad = np.asarray(grad, dtype=np.float64)
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _tape_of(*args) -> Optional[DualTape]:
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ContractError("cannot combine Vars from different tapes")
    return tape


def value_of(x) -> np.ndarray:
    """Plain array behind a Var (or the array itself)."""
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _unary(x, out: np.ndarray, vjp: Vjp):
    if not isinstance(x, Var):
        return out
    return x.tape._record(out, ((x.index, vjp),))


def _binary(a, b, out: np.ndarray, vjp_a: Vjp, vjp_b: Vjp):
    tape = _tape_of(a, b)
    if tape is None:
        return out
    parents = []
    if isinstance(a, Var):
        parents.append((a.index, vjp_a))
    if isinstance(b, Var):
        parents.append((b.index, vjp_b))
    return tape._record(out, parents)


# ============================================================================
# Arithmetic
# ============================================================================


def add(a, b):
    return _binary(a, b, value_of(a) + value_of(b), lambda g: g, lambda g: g)


def sub(a, b):
    return _binary(a, b, value_of(a) - value_of(b), lambda g: g, lambda g: -g)


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    return _binary(a, b, av * bv, lambda g: g * bv, lambda g: g * av)


def div(a, b):
    av, bv = value_of(a), value_of(b)
    return _binary(a, b, av / bv, lambda g: g / bv, lambda g: -g * av / (bv * bv))


def neg(x):
    return _unary(x, -value_of(x), lambda g: -g)


def matmul(a, b):
    """(n, i) @ (i, o)."""
    av, bv = value_of(a), value_of(b)
    return _binary(a, b, av @ bv, lambda g: g @ bv.T, lambda g: av.T @ g)


def batched_matvec(m: np.ndarray, x):
    """Row-wise m[r] @ x[r] for constant m (n, 3, 3) and x (n, 3).

    Written out component-wise so results do not depend on BLAS blocking.
    """
    m = np.asarray(m, dtype=np.float64)
    xv = value_of(x)
    out = np.stack(
        [m[:, i, 0] * xv[:, 0] + m[:, i, 1] * xv[:, 1] + m[:, i, 2] * xv[:, 2] for i in range(3)],
        axis=1,
    )

    def vjp(g):
        return np.stack(
            [m[:, 0, j] * g[:, 0] + m[:, 1, j] * g[:, 1] + m[:, 2, j] * g[:, 2] for j in range(3)],
            axis=1,
        )

    return _unary(x, out, vjp)


# ============================================================================
# Elementwise nonlinearities
# ============================================================================


def exp(x):
    out = np.exp(value_of(x))
    return _unary(x, out, lambda g: g * out)


def softplus(x):
    xv = value_of(x)
    return _unary(x, np.logaddexp(0.0, xv), lambda g: g * expit(xv))


def sigmoid(x):
    out = expit(value_of(x))
    return _unary(x, out, lambda g: g * out * (1.0 - out))


def relu(x):
    xv = value_of(x)
    return _unary(x, np.maximum(xv, 0.0), lambda g: g * (xv > 0.0))


def sqrt(x):
    out = np.sqrt(value_of(x))

    def vjp(g):
        safe = np.where(out > 0.0, out, 1.0)
        return np.where(out > 0.0, g * 0.5 / safe, 0.0)

    return _unary(x, out, vjp)


def abs_(x):
    """|x| with subgradient 0 at 0."""
    xv = value_of(x)
    return _unary(x, np.abs(xv), lambda g: g * np.sign(xv))


def norm(x, axis: int = -1):
    """Euclidean norm along `axis`; gradient 0 where the norm is 0."""
    xv = value_of(x)
    out = np.sqrt(np.sum(xv * xv, axis=axis))

    def vjp(g):
        n = np.expand_dims(out, axis)
        safe = np.where(n > 0.0, n, 1.0)
        return np.where(n > 0.0, np.expand_dims(g, axis) * xv / safe, 0.0)

    return _unary(x, out, vjp)


# ============================================================================
# Reductions and structure
# ============================================================================


def sum_(x, axis=None, keepdims: bool = False):
    xv = value_of(x)
    out = np.sum(xv, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, xv.shape).copy()

    return _unary(x, np.asarray(out, dtype=np.float64), vjp)


def mean(x, axis=None):
    xv = value_of(x)
    count = xv.size if axis is None else xv.shape[axis]
    return div(sum_(x, axis=axis), float(count))


def cumsum_exclusive(x, axis: int = -1):
    """out[j] = sum of x[i] for i < j along axis (out[0] = 0)."""
    xv = value_of(x)
    head = [slice(None)] * xv.ndim
    tail = [slice(None)] * xv.ndim
    head[axis] = slice(1, None)
    tail[axis] = slice(None, -1)
    out = np.zeros_like(xv)
    out[tuple(head)] = np.cumsum(xv[tuple(tail)], axis=axis)

    def vjp(g):
        # dx_i = sum of g_j for j > i
        grad = np.zeros_like(g)
        grad[tuple(tail)] = np.flip(np.cumsum(np.flip(g[tuple(head)], axis=axis), axis=axis), axis=axis)
        return grad

    return _unary(x, out, vjp)


def concat(parts: Sequence, axis: int = -1):
    values = [value_of(p) for p in parts]
    out = np.concatenate(values, axis=axis)
    tape = _tape_of(*parts)
    if tape is None:
        return out
    bounds = np.cumsum([0] + [v.shape[axis] for v in values])
    parents = []
    for p, start, stop in zip(parts, bounds[:-1], bounds[1:]):
        if isinstance(p, Var):
            def vjp(g, start=start, stop=stop):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(start, stop)
                return g[tuple(sl)]
            parents.append((p.index, vjp))
    return tape._record(out, parents)


def index(x, key):
    xv = value_of(x)
    out = np.array(xv[key], dtype=np.float64)

    def vjp(g):
        full = np.zeros_like(xv)
        np.add.at(full, key, g)
        return full

    return _unary(x, out, vjp)


def reshape(x, shape):
    xv = value_of(x)
    return _unary(x, xv.reshape(shape), lambda g: np.reshape(g, xv.shape))


def where(mask: np.ndarray, a, b):
    """Select a where the constant mask holds, else b."""
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, value_of(a), value_of(b))
    return _binary(a, b, out, lambda g: np.where(mask, g, 0.0), lambda g: np.where(mask, 0.0, g))
