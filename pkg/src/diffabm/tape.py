"""Reverse-mode differentiation on a flat tape of vectorized operations.

Values on the tape are floats or numpy arrays; the node count stays
proportional to the number of recorded operations, not to the number of
agents, because per-agent quantities travel through the tape as whole
vectors. Operations accept any mix of plain numbers/arrays and
:class:`TapeValue` operands; when no operand is taped the result is a plain
numpy value, so the same model code runs with or without gradient tracking.
"""

from __future__ import annotations

import math
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp

from .errors import DomainError, GradientError, UsageError

ArrayLike = Union[float, int, np.ndarray, "TapeValue"]


class Param:
    """A named, bounded leaf parameter.

    ``value`` is kept inside ``bounds`` at all times; ``grad`` is populated by
    :meth:`Tape.backward` and by the optimizer between steps.
    """

    __slots__ = ("name", "value", "lo", "hi", "grad")

    def __init__(self, name: str, value, bounds: Tuple[float, float] = (-math.inf, math.inf)):
        lo, hi = float(bounds[0]), float(bounds[1])
        if lo > hi:
            raise UsageError(f"param {name!r}: bounds lo={lo} > hi={hi}")
        arr = np.asarray(value, dtype=float)
        if not np.all(np.isfinite(arr)):
            raise DomainError(f"param {name!r}: non-finite initial value")
        if np.any(arr < lo) or np.any(arr > hi):
            raise DomainError(f"param {name!r}: value outside bounds [{lo}, {hi}]")
        self.name = name
        self.value = arr
        self.lo = lo
        self.hi = hi
        self.grad: Optional[np.ndarray] = None

    def clamp(self) -> None:
        np.clip(self.value, self.lo, self.hi, out=self.value)

    def scalar(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        return f"Param({self.name!r}, value={self.value!r})"


class _Node:
    __slots__ = ("op", "value", "parents", "vjps", "param")

    def __init__(self, op, value, parents, vjps, param=None):
        self.op = op
        self.value = value
        self.parents = parents  # tuple of node ids
        self.vjps = vjps  # tuple of callables grad_out -> grad_parent (pre-unbroadcast)
        self.param = param


class TapeValue:
    """Handle to one node of a :class:`Tape`; supports arithmetic operators."""

    __slots__ = ("tape", "node_id")

    def __init__(self, tape: "Tape", node_id: int):
        self.tape = tape
        self.node_id = node_id

    @property
    def value(self) -> np.ndarray:
        return self.tape._nodes[self.node_id].value

    @property
    def shape(self):
        return np.shape(self.value)

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        return f"TapeValue(node={self.node_id}, value={self.value!r})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, k):
        return power(self, k)


class Tape:
    """Flat record of operations; reusable for repeated backward passes."""

    def __init__(self):
        self._nodes: List[_Node] = []
        self._leaves: Dict[int, int] = {}  # id(param) -> node id
        self._params: List[Param] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def watch(self, param: Param) -> TapeValue:
        """Register ``param`` as a leaf and return its tape handle."""
        key = id(param)
        node_id = self._leaves.get(key)
        if node_id is None:
            node = _Node("leaf", param.value.copy(), (), (), param=param)
            self._nodes.append(node)
            node_id = len(self._nodes) - 1
            self._leaves[key] = node_id
            self._params.append(param)
        return TapeValue(self, node_id)

    def append(self, op: str, value, parents: Tuple[int, ...], vjps) -> TapeValue:
        self._nodes.append(_Node(op, value, parents, vjps))
        return TapeValue(self, len(self._nodes) - 1)

    def backward(self, output: TapeValue) -> Dict[Param, Union[float, np.ndarray]]:
        """Return d(output)/d(param) for every watched param.

        ``output`` must be a scalar node of this tape. The tape is left
        untouched, so further backward calls (same or other outputs) are
        valid. Also populates ``param.grad`` as a side effect.
        """
        if not isinstance(output, TapeValue):
            raise UsageError("backward output must be a TapeValue")
        if output.tape is not self:
            raise UsageError("output does not belong to this tape")
        out_node = self._nodes[output.node_id]
        if np.size(out_node.value) != 1:
            raise UsageError("backward output must be scalar")
        if not np.all(np.isfinite(out_node.value)):
            raise GradientError(
                f"NaN at output node {output.node_id} (op {out_node.op!r})"
            )

        adjoint: Dict[int, np.ndarray] = {
            output.node_id: np.ones_like(np.asarray(out_node.value, dtype=float))
        }
        for nid in range(output.node_id, -1, -1):
            g = adjoint.pop(nid, None)
            if g is None:
                continue
            node = self._nodes[nid]
            if not np.all(np.isfinite(g)):
                raise GradientError(f"NaN gradient at node {nid} (op {node.op!r})")
            if node.op == "leaf":
                node.param.grad = _accumulate(node.param.grad, g, node.value)
                continue
            for pid, vjp in zip(node.parents, node.vjps):
                if vjp is None:
                    continue
                contrib = _unbroadcast(vjp(g), np.shape(self._nodes[pid].value))
                prev = adjoint.get(pid)
                adjoint[pid] = contrib if prev is None else prev + contrib

        grads: Dict[Param, Union[float, np.ndarray]] = {}
        for param in self._params:
            if param.grad is None:
                param.grad = np.zeros_like(param.value)
            grads[param] = float(param.grad) if param.grad.ndim == 0 else param.grad
        return grads


def _accumulate(existing, g, ref_value):
    g = _unbroadcast(np.asarray(g, dtype=float), np.shape(ref_value))
    if existing is None:
        return np.array(g, dtype=float)
    return existing + g


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverses numpy broadcasting)."""
    grad = np.asarray(grad, dtype=float)
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def is_taped(x) -> bool:
    return isinstance(x, TapeValue)


def value_of(x: ArrayLike) -> np.ndarray:
    """Raw numpy value of a taped or plain operand."""
    if isinstance(x, TapeValue):
        return x.value
    return np.asarray(x, dtype=float)


def _find_tape(*xs) -> Optional[Tape]:
    tape = None
    for x in xs:
        if isinstance(x, TapeValue):
            if tape is None:
                tape = x.tape
            elif tape is not x.tape:
                raise UsageError("operands belong to different tapes")
    return tape


def _record(tape, op, value, operands, vjps) -> TapeValue:
    parents = []
    kept_vjps = []
    for x, vjp in zip(operands, vjps):
        if isinstance(x, TapeValue):
            parents.append(x.node_id)
            kept_vjps.append(vjp)
    return tape.append(op, value, tuple(parents), tuple(kept_vjps))


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: ArrayLike, b: ArrayLike):
    tape = _find_tape(a, b)
    out = value_of(a) + value_of(b)
    if tape is None:
        return out
    return _record(tape, "add", out, (a, b), (lambda g: g, lambda g: g))


def sub(a: ArrayLike, b: ArrayLike):
    tape = _find_tape(a, b)
    out = value_of(a) - value_of(b)
    if tape is None:
        return out
    return _record(tape, "sub", out, (a, b), (lambda g: g, lambda g: -g))


def mul(a: ArrayLike, b: ArrayLike):
    tape = _find_tape(a, b)
    av, bv = value_of(a), value_of(b)
    out = av * bv
    if tape is None:
        return out
    return _record(tape, "mul", out, (a, b), (lambda g: g * bv, lambda g: g * av))


def div(a: ArrayLike, b: ArrayLike):
    tape = _find_tape(a, b)
    av, bv = value_of(a), value_of(b)
    out = av / bv
    if tape is None:
        return out
    return _record(
        tape, "div", out, (a, b), (lambda g: g / bv, lambda g: -g * av / (bv * bv))
    )


def neg(a: ArrayLike):
    tape = _find_tape(a)
    out = -value_of(a)
    if tape is None:
        return out
    return _record(tape, "neg", out, (a,), (lambda g: -g,))


def power(a: ArrayLike, k: float):
    tape = _find_tape(a)
    av = value_of(a)
    out = av ** k
    if tape is None:
        return out
    return _record(tape, "pow", out, (a,), (lambda g: g * k * av ** (k - 1),))


def exp(a: ArrayLike):
    tape = _find_tape(a)
    out = np.exp(value_of(a))
    if tape is None:
        return out
    return _record(tape, "exp", out, (a,), (lambda g: g * out,))


def log(a: ArrayLike):
    tape = _find_tape(a)
    out = np.log(value_of(a))
    if tape is None:
        return out
    av = value_of(a)
    return _record(tape, "log", out, (a,), (lambda g: g / av,))


def sigmoid(a: ArrayLike):
    tape = _find_tape(a)
    av = np.asarray(value_of(a), dtype=float)
    # both signs share exp(-|a|), so sigmoid(a) + sigmoid(-a) == 1 bit-exactly
    w = np.exp(-np.abs(av))
    frac = w / (1.0 + w)
    out = np.where(av >= 0, 1.0 - frac, frac)
    if av.ndim == 0:
        out = float(out)
    if tape is None:
        return out
    return _record(tape, "sigmoid", out, (a,), (lambda g: g * out * (1.0 - out),))


def tanh(a: ArrayLike):
    tape = _find_tape(a)
    out = np.tanh(value_of(a))
    if tape is None:
        return out
    return _record(tape, "tanh", out, (a,), (lambda g: g * (1.0 - out * out),))


def clip(a: ArrayLike, lo: float, hi: float):
    """Clamp with pass-through gradient strictly inside [lo, hi]."""
    tape = _find_tape(a)
    av = value_of(a)
    out = np.clip(av, lo, hi)
    if tape is None:
        return out
    inside = ((av >= lo) & (av <= hi)).astype(float)
    return _record(tape, "clip", out, (a,), (lambda g: g * inside,))


# ---------------------------------------------------------------------------
# reductions and linear algebra


def tsum(a: ArrayLike, axis=None):
    tape = _find_tape(a)
    av = value_of(a)
    out = np.sum(av, axis=axis)
    if tape is None:
        return out

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, np.shape(av)).copy()
        return np.broadcast_to(np.expand_dims(g, axis), np.shape(av)).copy()

    return _record(tape, "sum", out, (a,), (vjp,))


def tmean(a: ArrayLike):
    n = np.size(value_of(a))
    return div(tsum(a), float(n))


def dot(a: ArrayLike, b: ArrayLike):
    """Inner product of two 1-d operands."""
    tape = _find_tape(a, b)
    av, bv = value_of(a), value_of(b)
    out = float(np.dot(av, bv))
    if tape is None:
        return out
    return _record(tape, "dot", out, (a, b), (lambda g: g * bv, lambda g: g * av))


def matmul(a: ArrayLike, b: ArrayLike):
    """Matrix product: (m,n)@(n,) -> (m,) or (m,n)@(n,k) -> (m,k)."""
    tape = _find_tape(a, b)
    av, bv = value_of(a), value_of(b)
    out = av @ bv
    if tape is None:
        return out
    if bv.ndim == 1:
        vjp_a = lambda g: np.outer(g, bv)
        vjp_b = lambda g: av.T @ g
    else:
        vjp_a = lambda g: g @ bv.T
        vjp_b = lambda g: av.T @ g
    return _record(tape, "matmul", out, (a, b), (vjp_a, vjp_b))


def spmatvec(matrix: sp.spmatrix, x: ArrayLike):
    """Sparse-matrix / dense-vector product; the matrix is a constant."""
    tape = _find_tape(x)
    xv = value_of(x)
    out = matrix @ xv
    if tape is None:
        return out
    mat_t = matrix.T
    return _record(tape, "spmatvec", out, (x,), (lambda g: mat_t @ g,))


def gather(a: ArrayLike, idx: np.ndarray):
    """Index a 1-d operand with an integer array; scatter-add backward."""
    tape = _find_tape(a)
    av = value_of(a)
    out = av[idx]
    if tape is None:
        return out

    def vjp(g):
        acc = np.zeros_like(np.asarray(av, dtype=float))
        np.add.at(acc, idx, g)
        return acc

    return _record(tape, "gather", out, (a,), (vjp,))


def where_const(mask: np.ndarray, a: ArrayLike, b: ArrayLike):
    """Select between two operands with a constant boolean mask."""
    m = np.asarray(mask, dtype=float)
    return add(mul(m, a), mul(1.0 - m, b))


def backward(tape: Tape, output: TapeValue) -> Dict[Param, Union[float, np.ndarray]]:
    """Module-level alias for :meth:`Tape.backward`."""
    return tape.backward(output)
