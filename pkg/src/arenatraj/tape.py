"""Dense float64 tensors with a define-by-run reverse-mode tape.

A :class:`Tape` records one primitive op per node.  Nodes are appended in
execution order, so walking the list backwards is a valid reverse topological
order.  Tapes are rebuilt on every forward pass; parameters live outside the
tape as plain ndarrays and are wrapped with :meth:`Tape.leaf` per pass.

Every primitive validates operand shapes, evaluates with numpy and checks the
result for NaN/Inf before recording its adjoint.
"""

from __future__ import annotations

import warnings
from typing import Callable, Iterable

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operands passed to a primitive have incompatible shapes."""


class DomainError(ValueError):
    """A primitive was evaluated outside its mathematical domain."""


class NonFiniteError(ArithmeticError):
    """A forward op produced NaN or Inf."""


#: name -> callable for every registered primitive
PRIMITIVES: dict[str, Callable] = {}


def _primitive(fn):
    PRIMITIVES[fn.__name__] = fn
    return fn


def _finite(op: str, value: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op} produced non-finite values")
    return value


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (adjoint of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """An ndarray value registered as one node of a tape."""

    __slots__ = ("value", "tape", "node_id", "needs_grad", "grad")

    def __init__(self, value: np.ndarray, tape: "Tape", node_id: int, needs_grad: bool):
        self.value = value
        self.tape = tape
        self.node_id = node_id
        self.needs_grad = needs_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.value.shape}, node={self.node_id})"

    # arithmetic sugar; non-tensor operands become constants on the same tape
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(self.tape.const(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(self.tape.const(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


class _Node:
    __slots__ = ("parents", "backward_fn")

    def __init__(self, parents: tuple[int, ...], backward_fn):
        self.parents = parents
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of primitive ops; rebuilt every forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.tensors: list[Tensor] = []
        self._reached: list[bool] = []

    def _register(self, value, parents, backward_fn, needs_grad) -> Tensor:
        node_id = len(self.nodes)
        self.nodes.append(_Node(parents, backward_fn))
        t = Tensor(value, self, node_id, needs_grad)
        self.tensors.append(t)
        return t

    def leaf(self, value, check_finite: bool = True) -> Tensor:
        """Wrap a parameter array; gradients accumulate into it."""
        arr = np.asarray(value, dtype=np.float64)
        if check_finite:
            _finite("leaf", arr)
        return self._register(arr, (), None, True)

    def const(self, value) -> Tensor:
        """Wrap an input; no gradient is tracked through it."""
        arr = np.asarray(value, dtype=np.float64)
        _finite("const", arr)
        return self._register(arr, (), None, False)

    def reached(self, tensor: Tensor) -> bool:
        """Whether the last backward call propagated a gradient to `tensor`."""
        if not self._reached:
            raise RuntimeError("backward has not been called on this tape")
        return self._reached[tensor.node_id]

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(node) for every grad-tracked node.

        `loss` must be scalar.  Accumulators are zero-initialized on each
        call; leaves never reached by the sweep get an explicit zero grad.
        """
        if loss.tape is not self:
            raise ValueError("loss tensor belongs to a different tape")
        if loss.value.size != 1:
            raise ValueError(
                f"backward needs a scalar loss, got shape {loss.value.shape}"
            )
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[loss.node_id] = np.ones_like(loss.value)
        for nid in range(loss.node_id, -1, -1):
            g = grads[nid]
            if g is None:
                continue
            node = self.nodes[nid]
            if node.backward_fn is None:
                continue
            parent_grads = node.backward_fn(g)
            for pid, pg in zip(node.parents, parent_grads):
                if pg is None or not self.tensors[pid].needs_grad:
                    continue
                if grads[pid] is None:
                    grads[pid] = pg
                else:
                    grads[pid] = grads[pid] + pg
        self._reached = [g is not None for g in grads]
        for t in self.tensors:
            if not t.needs_grad:
                continue
            g = grads[t.node_id]
            t.grad = g if g is not None else np.zeros_like(t.value)


def _coerce_pair(op: str, a, b, broadcast=True):
    if isinstance(a, Tensor):
        tape = a.tape
    elif isinstance(b, Tensor):
        tape = b.tape
    else:
        raise TypeError(f"{op}: at least one operand must be a Tensor")
    if not isinstance(a, Tensor):
        a = tape.const(a)
    if not isinstance(b, Tensor):
        b = tape.const(b)
    if a.tape is not b.tape:
        raise ValueError(f"{op}: operands belong to different tapes")
    if broadcast:
        try:
            np.broadcast_shapes(a.value.shape, b.value.shape)
        except ValueError:
            raise ShapeError(f"{op}: shapes {a.value.shape} and {b.value.shape} "
                             "do not broadcast") from None
    return a, b


def _record(op, tape, value, parent_tensors, backward_fn):
    needs = any(p.needs_grad for p in parent_tensors)
    return tape._register(
        _finite(op, value),
        tuple(p.node_id for p in parent_tensors),
        backward_fn if needs else None,
        needs,
    )


# --- elementwise arithmetic -------------------------------------------------


@_primitive
def add(a, b):
    a, b = _coerce_pair("add", a, b)
    av, bv = a.value, b.value

    def bwd(g):
        return _unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)

    return _record("add", a.tape, av + bv, (a, b), bwd)


@_primitive
def sub(a, b):
    a, b = _coerce_pair("sub", a, b)
    av, bv = a.value, b.value

    def bwd(g):
        return _unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)

    return _record("sub", a.tape, av - bv, (a, b), bwd)


@_primitive
def mul(a, b):
    a, b = _coerce_pair("mul", a, b)
    av, bv = a.value, b.value

    def bwd(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return _record("mul", a.tape, av * bv, (a, b), bwd)


@_primitive
def div(a, b):
    a, b = _coerce_pair("div", a, b)
    av, bv = a.value, b.value
    if np.any(bv == 0.0):
        raise DomainError("div: denominator contains zero")

    def bwd(g):
        return (_unbroadcast(g / bv, av.shape),
                _unbroadcast(-g * av / (bv * bv), bv.shape))

    return _record("div", a.tape, av / bv, (a, b), bwd)


@_primitive
def square(x):
    xv = x.value

    def bwd(g):
        return (2.0 * xv * g,)

    return _record("square", x.tape, xv * xv, (x,), bwd)


@_primitive
def exp(x):
    with np.errstate(over="ignore"):
        out = np.exp(x.value)
    out = _finite("exp", out)

    def bwd(g):
        return (g * out,)

    return _record("exp", x.tape, out, (x,), bwd)


@_primitive
def log(x):
    xv = x.value
    if np.any(xv <= 0.0):
        raise DomainError("log: argument must be strictly positive")

    def bwd(g):
        return (g / xv,)

    return _record("log", x.tape, np.log(xv), (x,), bwd)


@_primitive
def sigmoid(x):
    xv = x.value
    out = np.empty_like(xv)
    pos = xv >= 0
    with np.errstate(over="ignore"):
        out[pos] = 1.0 / (1.0 + np.exp(-xv[pos]))
        e = np.exp(xv[~pos])
        out[~pos] = e / (1.0 + e)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _record("sigmoid", x.tape, out, (x,), bwd)


@_primitive
def tanh(x):
    out = np.tanh(x.value)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return _record("tanh", x.tape, out, (x,), bwd)


# --- shape manipulation ------------------------------------------------------


@_primitive
def reshape(x, shape):
    xv = x.value
    try:
        out = xv.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {xv.shape} as {shape}") from None

    def bwd(g):
        return (g.reshape(xv.shape),)

    return _record("reshape", x.tape, out, (x,), bwd)


@_primitive
def transpose(x, axes=None):
    xv = x.value
    perm = tuple(axes) if axes is not None else tuple(range(xv.ndim))[::-1]
    inv = tuple(np.argsort(perm))

    def bwd(g):
        return (np.transpose(g, inv),)

    return _record("transpose", x.tape, np.transpose(xv, perm), (x,), bwd)


@_primitive
def broadcast_to(x, shape):
    xv = x.value
    try:
        out = np.broadcast_to(xv, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {xv.shape} to {shape}") from None

    def bwd(g):
        return (_unbroadcast(g, xv.shape),)

    return _record("broadcast_to", x.tape, out, (x,), bwd)


@_primitive
def concat(tensors: Iterable[Tensor], axis: int = -1):
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    tape = tensors[0].tape
    if any(t.tape is not tape for t in tensors):
        raise ValueError("concat: operands belong to different tapes")
    values = [t.value for t in tensors]
    try:
        out = np.concatenate(values, axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: incompatible shapes {[v.shape for v in values]}"
        ) from None
    ax = axis if axis >= 0 else out.ndim + axis
    sizes = [v.shape[ax] for v in values]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, offsets, axis=ax))

    return _record("concat", tape, out, tuple(tensors), bwd)


@_primitive
def gather(x, indices, axis: int = 0):
    """Select rows of `x` along `axis` by a 1-D integer index (embedding lookup)."""
    xv = x.value
    idx = np.atleast_1d(np.asarray(indices))
    if idx.dtype.kind not in "iu":
        raise TypeError("gather: indices must be integers")
    if idx.ndim != 1:
        raise ShapeError(f"gather: indices must be 1-D, got shape {idx.shape}")
    dim = xv.shape[axis]
    if idx.size and (idx.min() < 0 or idx.max() >= dim):
        raise IndexError(
            f"gather: index out of range for axis of size {dim} "
            f"(got min {idx.min()}, max {idx.max()})"
        )
    out = np.take(xv, idx, axis=axis)

    def bwd(g):
        dx = np.zeros_like(xv)
        np.add.at(np.moveaxis(dx, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (dx,)

    return _record("gather", x.tape, out, (x,), bwd)


# --- reductions ---------------------------------------------------------------


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a if a >= 0 else len(shape) + a for a in axes)
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


@_primitive
def reduce_sum(x, axis=None, keepdims=False):
    xv = x.value

    def bwd(g):
        return (_expand_reduced(g, xv.shape, axis, keepdims).copy(),)

    return _record("reduce_sum", x.tape, np.sum(xv, axis=axis, keepdims=keepdims), (x,), bwd)


@_primitive
def reduce_mean(x, axis=None, keepdims=False):
    xv = x.value
    if axis is None:
        count = xv.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for a in axes:
            count *= xv.shape[a]

    def bwd(g):
        return (_expand_reduced(g, xv.shape, axis, keepdims).copy() / count,)

    return _record("reduce_mean", x.tape, np.mean(xv, axis=axis, keepdims=keepdims), (x,), bwd)


# --- linear algebra / normalization -------------------------------------------


@_primitive
def matmul(a, b):
    a, b = _coerce_pair("matmul", a, b, broadcast=False)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeError(f"matmul: operands must be >= 2-D, got {av.shape} @ {bv.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {av.shape} @ {bv.shape}")
    try:
        out = np.matmul(av, bv)
    except ValueError:
        raise ShapeError(f"matmul: batch dims differ, {av.shape} @ {bv.shape}") from None

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(bv, -1, -2))
        gb = np.matmul(np.swapaxes(av, -1, -2), g)
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _record("matmul", a.tape, out, (a, b), bwd)


@_primitive
def softmax(x):
    """Softmax over the last axis, max-subtracted for stability."""
    xv = x.value
    m = xv.max(axis=-1, keepdims=True)
    e = np.exp(xv - m)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((g - dot) * out,)

    return _record("softmax", x.tape, out, (x,), bwd)


@_primitive
def l2_normalize(x):
    """Scale rows (last axis) to unit L2 norm; zero rows pass through."""
    xv = x.value
    norms = np.sqrt(np.sum(xv * xv, axis=-1, keepdims=True))
    zero = norms == 0.0
    if np.any(zero):
        warnings.warn("l2_normalize: zero-norm row passed through unchanged")
    safe = np.where(zero, 1.0, norms)
    out = xv / safe

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (np.where(zero, g, (g - out * dot) / safe),)

    return _record("l2_normalize", x.tape, out, (x,), bwd)


@_primitive
def gru_sequence(x, w_ih, w_hh, b_ih, b_hh):
    """Run a GRU over the time axis: x (B,T,Din) -> hidden states (B,T,H).

    The recurrence starts from a zero state.  Forward and backward loops are
    the fused kernels in :mod:`arenatraj.kernels`.
    """
    xv, wiv, whv, biv, bhv = (t.value for t in (x, w_ih, w_hh, b_ih, b_hh))
    if xv.ndim != 3:
        raise ShapeError(f"gru_sequence: x must be (B,T,Din), got {xv.shape}")
    H3, Din = wiv.shape
    H = H3 // 3
    if H3 != 3 * H or whv.shape != (H3, H) or biv.shape != (H3,) or bhv.shape != (H3,):
        raise ShapeError(
            f"gru_sequence: weight shapes {wiv.shape} {whv.shape} {biv.shape} {bhv.shape}"
        )
    if xv.shape[2] != Din:
        raise ShapeError(f"gru_sequence: x feature dim {xv.shape[2]} != {Din}")
    xv = np.ascontiguousarray(xv)
    h_seq, cache = kernels.gru_forward(xv, wiv, whv, biv, bhv)

    def bwd(g):
        return kernels.gru_backward(g, xv, cache, wiv, whv)

    return _record("gru_sequence", x.tape, h_seq, (x, w_ih, w_hh, b_ih, b_hh), bwd)
