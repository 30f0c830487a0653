"""Reverse-mode automatic differentiation over dense float64 matrices.

Every value is a 2-D C-ordered float64 array. Operations dispatch on their
arguments: with plain arrays they evaluate eagerly in numpy, with `Var`
arguments they additionally record the op on the owning `Tape` so that
`Tape.gradient` can run a single reverse sweep. Tapes are rebuilt per
forward pass; nothing is retained between passes.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import erf as _sp_erf


class ShapeMismatch(ValueError):
    """Raised when operand shapes are incompatible; names both shapes."""

    def __init__(self, op: str, a: tuple, b: tuple | None = None):
        if b is None:
            super().__init__(f"{op}: invalid operand shape {a}")
        else:
            super().__init__(f"{op}: incompatible shapes {a} and {b}")


class NonFiniteValue(FloatingPointError):
    """Raised when an operation produces NaN or infinity."""


def as_matrix(x, name: str = "value") -> np.ndarray:
    """Coerce to a 2-D float64 array; column vectors stay n x 1."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(-1, 1)
    elif a.ndim != 2:
        raise ShapeMismatch(name, a.shape)
    return np.ascontiguousarray(a)


def _require_finite(out: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        raise NonFiniteValue(f"{op} produced non-finite entries")
    return out


# ---------------------------------------------------------------------------
# Activation registry: name -> (function, derivative-as-function-of-input).
# The ReLU derivative at exactly 0 is defined as 0 (subgradient choice);
# sqrt gets the same treatment where its argument is exactly 0.
# ---------------------------------------------------------------------------

def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    "identity": (lambda x: x, lambda x: np.ones_like(x)),
    "relu": (lambda x: np.maximum(x, 0.0), lambda x: (x > 0).astype(np.float64)),
    "tanh": (np.tanh, lambda x: 1.0 - np.tanh(x) ** 2),
    "erf": (_sp_erf, lambda x: (2.0 / np.sqrt(np.pi)) * np.exp(-(x ** 2))),
    "sigmoid": (_sigmoid, lambda x: _sigmoid(x) * (1.0 - _sigmoid(x))),
}


class Tape:
    """Append-only record of primitive ops; parents always precede children."""

    def __init__(self):
        self._parents: list[tuple[int, ...]] = []
        self._vjps: list[Callable | None] = []
        self._values: list[np.ndarray] = []

    def __len__(self) -> int:
        return len(self._values)

    def leaf(self, value) -> "Var":
        """Register an input node whose gradient may be requested."""
        return self._append(as_matrix(value), (), None)

    def _append(self, value: np.ndarray, parents: tuple[int, ...],
                vjp: Callable | None) -> "Var":
        self._parents.append(parents)
        self._vjps.append(vjp)
        self._values.append(value)
        return Var(self, len(self._values) - 1)

    def gradient(self, output: "Var", wrt: Sequence["Var"]) -> list[np.ndarray]:
        """d(output)/d(node) for each requested node, via one reverse sweep."""
        if output.tape is not self:
            raise ValueError("output does not belong to this tape")
        if output.value.shape != (1, 1):
            raise ShapeMismatch("gradient: output must be scalar", output.value.shape)
        for v in wrt:
            if v.tape is not self:
                raise ValueError("gradient target does not belong to this tape")
        adjoint: list[np.ndarray | None] = [None] * len(self._values)
        adjoint[output.index] = np.ones((1, 1))
        for i in range(output.index, -1, -1):
            g = adjoint[i]
            if g is None or self._vjps[i] is None:
                continue
            for parent, pg in zip(self._parents[i], self._vjps[i](g)):
                if pg is None:
                    continue
                if adjoint[parent] is None:
                    adjoint[parent] = pg.copy()
                else:
                    adjoint[parent] += pg
        out = []
        for v in wrt:
            g = adjoint[v.index]
            out.append(np.zeros_like(v.value) if g is None else
                       _require_finite(g, "gradient"))
        return out


class Var:
    """Handle to one tape node."""

    __slots__ = ("tape", "index")

    def __init__(self, tape: Tape, index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape._values[self.index]

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, index={self.index})"


def _tape_of(*args) -> Tape | None:
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ValueError("operands come from different tapes")
    return tape


def _lift(tape: Tape, x) -> Var:
    return x if isinstance(x, Var) else tape.leaf(x)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else as_matrix(x)


# ---------------------------------------------------------------------------
# Primitives. Each has an eager numpy path and a traced path.
# ---------------------------------------------------------------------------

def matmul(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        av, bv = as_matrix(a), as_matrix(b)
        if av.shape[1] != bv.shape[0]:
            raise ShapeMismatch("matmul", av.shape, bv.shape)
        return _require_finite(av @ bv, "matmul")
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    if av.shape[1] != bv.shape[0]:
        raise ShapeMismatch("matmul", av.shape, bv.shape)
    out = _require_finite(av @ bv, "matmul")

    def vjp(g):
        return g @ bv.T, av.T @ g

    return tape._append(out, (a.index, b.index), vjp)


def _broadcast_check(op: str, sa: tuple, sb: tuple) -> None:
    ok = (sa == sb
          or sb == (1, 1) or sa == (1, 1)
          or (sb == (1, sa[1])) or (sa == (1, sb[1]))
          or (sb == (sa[0], 1)) or (sa == (sb[0], 1)))
    if not ok:
        raise ShapeMismatch(op, sa, sb)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    out = g
    if shape[0] == 1 and g.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    return out


def add(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        av, bv = as_matrix(a), as_matrix(b)
        _broadcast_check("add", av.shape, bv.shape)
        return av + bv
    a, b = _lift(tape, a), _lift(tape, b)
    _broadcast_check("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    out = a.value + b.value

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return tape._append(out, (a.index, b.index), vjp)


def sub(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        av, bv = as_matrix(a), as_matrix(b)
        _broadcast_check("sub", av.shape, bv.shape)
        return av - bv
    a, b = _lift(tape, a), _lift(tape, b)
    _broadcast_check("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    out = a.value - b.value

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return tape._append(out, (a.index, b.index), vjp)


def mul(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        av, bv = as_matrix(a), as_matrix(b)
        _broadcast_check("mul", av.shape, bv.shape)
        return av * bv
    a, b = _lift(tape, a), _lift(tape, b)
    _broadcast_check("mul", a.shape, b.shape)
    av, bv = a.value, b.value
    out = av * bv

    def vjp(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return tape._append(out, (a.index, b.index), vjp)


def scale(a, c: float):
    """Multiply by a python scalar constant."""
    tape = _tape_of(a)
    if tape is None:
        return as_matrix(a) * float(c)
    out = a.value * float(c)
    return tape._append(out, (a.index,), lambda g: (g * float(c),))


def neg(a):
    return scale(a, -1.0)


def elementwise(a, kind: str):
    """Apply a named activation entrywise."""
    if kind not in ACTIVATIONS:
        raise ValueError(f"unknown activation {kind!r}; known: {sorted(ACTIVATIONS)}")
    fn, dfn = ACTIVATIONS[kind]
    tape = _tape_of(a)
    if tape is None:
        return _require_finite(fn(as_matrix(a)), kind)
    av = a.value
    out = _require_finite(fn(av), kind)
    if kind == "identity":
        return tape._append(out, (a.index,), lambda g: (g,))
    return tape._append(out, (a.index,), lambda g: (g * dfn(av),))


def relu(a):
    return elementwise(a, "relu")


def tanh(a):
    return elementwise(a, "tanh")


def exp(a):
    tape = _tape_of(a)
    if tape is None:
        return _require_finite(np.exp(as_matrix(a)), "exp")
    out = _require_finite(np.exp(a.value), "exp")
    return tape._append(out, (a.index,), lambda g: (g * out,))


def log(a):
    tape = _tape_of(a)
    if tape is None:
        return _require_finite(np.log(as_matrix(a)), "log")
    av = a.value
    out = _require_finite(np.log(av), "log")
    return tape._append(out, (a.index,), lambda g: (g / av,))


def sqrt(a):
    """Entrywise square root; the gradient at exactly 0 is defined as 0."""
    tape = _tape_of(a)
    if tape is None:
        return _require_finite(np.sqrt(as_matrix(a)), "sqrt")
    out = _require_finite(np.sqrt(a.value), "sqrt")

    def vjp(g):
        d = np.zeros_like(out)
        nz = out > 0
        d[nz] = g[nz] / (2.0 * out[nz])
        return (d,)

    return tape._append(out, (a.index,), vjp)


def square(a):
    tape = _tape_of(a)
    if tape is None:
        return as_matrix(a) ** 2
    av = a.value
    return tape._append(av ** 2, (a.index,), lambda g: (2.0 * g * av,))


def total_sum(a):
    """Sum of all entries as a 1 x 1 matrix."""
    tape = _tape_of(a)
    if tape is None:
        return as_matrix(as_matrix(a).sum())
    sa = a.shape
    out = np.array([[a.value.sum()]])
    return tape._append(out, (a.index,), lambda g: (np.full(sa, g[0, 0]),))


def row_sum(a):
    """Sum along each row, n x m -> n x 1."""
    tape = _tape_of(a)
    if tape is None:
        return as_matrix(a).sum(axis=1, keepdims=True)
    sa = a.shape
    out = a.value.sum(axis=1, keepdims=True)
    return tape._append(out, (a.index,), lambda g: (np.broadcast_to(g, sa).copy(),))


def log_sum_exp(a):
    """Row-wise stable log-sum-exp, n x m -> n x 1."""
    tape = _tape_of(a)
    av = value_of(a)
    m = av.max(axis=1, keepdims=True)
    out = m + np.log(np.exp(av - m).sum(axis=1, keepdims=True))
    _require_finite(out, "log_sum_exp")
    if tape is None:
        return out
    soft = np.exp(av - out)
    return tape._append(out, (a.index,), lambda g: (g * soft,))


def transpose(a):
    tape = _tape_of(a)
    if tape is None:
        return as_matrix(a).T.copy()
    out = a.value.T.copy()
    return tape._append(out, (a.index,), lambda g: (g.T.copy(),))


def select_cols(a, idx):
    """Gather columns by integer index."""
    idx = np.asarray(idx, dtype=np.intp)
    tape = _tape_of(a)
    if tape is None:
        return as_matrix(a)[:, idx]
    sa = a.shape
    out = a.value[:, idx]

    def vjp(g):
        full = np.zeros(sa)
        np.add.at(full.T, idx, g.T)
        return (full,)

    return tape._append(out, (a.index,), vjp)


def concat_cols(parts: Sequence):
    """Horizontally stack matrices with equal row counts."""
    tape = _tape_of(*parts)
    if tape is None:
        vals = [as_matrix(p) for p in parts]
        rows = {v.shape[0] for v in vals}
        if len(rows) != 1:
            raise ShapeMismatch("concat_cols", tuple(v.shape for v in vals))
        return np.hstack(vals)
    lifted = [_lift(tape, p) for p in parts]
    vals = [p.value for p in lifted]
    rows = {v.shape[0] for v in vals}
    if len(rows) != 1:
        raise ShapeMismatch("concat_cols", tuple(v.shape for v in vals))
    if len(lifted) == 1:
        return lifted[0]
    out = np.hstack(vals)
    widths = [v.shape[1] for v in vals]
    splits = np.cumsum(widths)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.hsplit(g, splits))

    return tape._append(out, tuple(p.index for p in lifted), vjp)


def logabsdet(a):
    """log |det A| for a square matrix, as 1 x 1."""
    tape = _tape_of(a)
    av = value_of(a)
    if av.shape[0] != av.shape[1]:
        raise ShapeMismatch("logabsdet: square matrix required", av.shape)
    _, ld = np.linalg.slogdet(av)
    out = as_matrix(ld)
    _require_finite(out, "logabsdet")
    if tape is None:
        return out
    inv_t = np.linalg.inv(av).T
    return tape._append(out, (a.index,), lambda g: (g[0, 0] * inv_t,))


def rbf_gram(a, points: np.ndarray, lengthscale: float):
    """Gram block exp(-||x - z||^2 / (2 l^2)) against fixed rows `points`.

    Differentiable in the first argument only; `points` stays constant.
    """
    z = as_matrix(points)
    ell2 = float(lengthscale) ** 2
    tape = _tape_of(a)
    av = value_of(a)
    if av.shape[1] != z.shape[1]:
        raise ShapeMismatch("rbf_gram", av.shape, z.shape)
    sq = ((av ** 2).sum(axis=1, keepdims=True)
          + (z ** 2).sum(axis=1, keepdims=True).T
          - 2.0 * av @ z.T)
    out = np.exp(-0.5 * np.maximum(sq, 0.0) / ell2)
    if tape is None:
        return out

    def vjp(g):
        w = g * out / ell2
        return (w @ z - w.sum(axis=1, keepdims=True) * av,)

    return tape._append(out, (a.index,), vjp)


# ---------------------------------------------------------------------------
# SPD matrix roots with jitter escalation (used by inducing-point features).
# ---------------------------------------------------------------------------

class FactorizationError(np.linalg.LinAlgError):
    """Raised when an SPD factorization fails after full jitter escalation."""


_JITTER_MAX = 1e-4


def _spd_eig(k: np.ndarray, jitter: float, op: str):
    """Eigendecomposition of an SPD matrix, escalating jitter tenfold as needed."""
    k = as_matrix(k)
    if k.shape[0] != k.shape[1]:
        raise ShapeMismatch(op, k.shape)
    if not np.allclose(k, k.T, atol=1e-10 * (1.0 + np.abs(k).max())):
        raise ValueError(f"{op}: input matrix is not symmetric")
    sym = 0.5 * (k + k.T)
    floor = 1e-12 * max(1.0, float(np.abs(sym).max()))
    jit = 0.0
    while True:
        w, u = np.linalg.eigh(sym + jit * np.eye(k.shape[0]))
        if w.min() > floor:
            return w, u
        jit = jitter if jit == 0.0 else jit * 10.0
        if jit > _JITTER_MAX:
            raise FactorizationError(
                f"{op}: matrix not positive definite after jitter escalation to {_JITTER_MAX:g}")


def inverse_sqrt_spd(k, jitter: float = 1e-10) -> np.ndarray:
    """Symmetric M with M K M^T = I (up to the jitter actually applied)."""
    w, u = _spd_eig(k, jitter, "inverse_sqrt_spd")
    return (u / np.sqrt(w)) @ u.T


def sqrt_spd(k, jitter: float = 1e-10) -> np.ndarray:
    """Symmetric square root of an SPD matrix."""
    w, u = _spd_eig(k, jitter, "sqrt_spd")
    return (u * np.sqrt(w)) @ u.T
