"""Dense float64 tensors with reverse-mode automatic differentiation.

A `Tensor` wraps an immutable numpy array. Operations executed while a
`ComputationRecord` is active append tape nodes (inputs, output, backward
rule) in topological order; `backward` replays the tape once and returns a
gradient per tracked leaf. Without an active record the same operations
run as plain value computations.

Every forward kernel checks its output for NaN/Inf and raises
`NumericError` instead of propagating silent garbage.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import DegenerateInputError, NumericError, ShapeError, StructuralError

_ACTIVE_RECORD: Optional["ComputationRecord"] = None

# Optional sink for ReLU pre-activation magnitudes, used by gradient checks
# to reject finite-difference points that straddle a kink.
_KINK_SINK: Optional[list] = None


def _as_f64(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    return arr


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced non-finite values")


class Tensor:
    """Immutable n-dimensional float64 value, optionally gradient-tracked."""

    __slots__ = ("data", "grad_tracked", "node")

    def __init__(self, data, grad_tracked: bool = False, _node: "TapeNode | None" = None):
        self.data = _as_f64(data)
        self.grad_tracked = bool(grad_tracked)
        self.node = _node

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, tracked={self.grad_tracked})"

    # arithmetic sugar; all routes through the module-level ops
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return mul(self, _lift(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


class TapeNode:
    __slots__ = ("inputs", "out", "backward", "record")

    def __init__(self, inputs: tuple, out: Tensor, backward: Callable,
                 record: "ComputationRecord"):
        self.inputs = inputs
        self.out = out
        self.backward = backward
        self.record = record


class ComputationRecord:
    """Ordered tape of operations; one backward pass per record."""

    def __init__(self):
        self.ops: list[TapeNode] = []
        self.consumed = False

    def __enter__(self) -> "ComputationRecord":
        global _ACTIVE_RECORD
        if _ACTIVE_RECORD is not None:
            raise StructuralError("a ComputationRecord is already active")
        _ACTIVE_RECORD = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_RECORD
        _ACTIVE_RECORD = None
        return False


def active_record() -> Optional[ComputationRecord]:
    return _ACTIVE_RECORD


@contextlib.contextmanager
def kink_watch(sink: list):
    """Collect min |x| seen by relu during the block (for FD kink rejection)."""
    global _KINK_SINK
    prev = _KINK_SINK
    _KINK_SINK = sink
    try:
        yield sink
    finally:
        _KINK_SINK = prev


def apply_op(name: str, inputs: Sequence[Tensor], out_data: np.ndarray,
             backward: Callable) -> Tensor:
    """Wrap a computed value as a Tensor, recording a tape node when needed.

    `backward` maps the output gradient to one gradient (or None) per input,
    already reduced to each input's shape.
    """
    _check_finite(out_data, name)
    tracked = any(t.grad_tracked for t in inputs)
    rec = _ACTIVE_RECORD
    if rec is not None and tracked:
        out = Tensor(out_data, grad_tracked=True)
        node = TapeNode(tuple(inputs), out, backward, rec)
        out.node = node
        rec.ops.append(node)
        return out
    return Tensor(out_data, grad_tracked=False)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise binary ops (with broadcasting)

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return apply_op("add", (a, b), out, lambda g: (
        _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    return apply_op("sub", (a, b), out, lambda g: (
        _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return apply_op("mul", (a, b), out, lambda g: (
        _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data
    return apply_op("div", (a, b), out, lambda g: (
        _unbroadcast(g / b.data, a.shape),
        _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


# ---------------------------------------------------------------------------
# elementwise unary ops

def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return apply_op("exp", (a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)
    return apply_op("log", (a,), out, lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return apply_op("sqrt", (a,), out, lambda g: (g / (2.0 * out),))


def relu(a: Tensor) -> Tensor:
    if _KINK_SINK is not None and a.data.size:
        _KINK_SINK.append(float(np.min(np.abs(a.data))))
    out = np.maximum(a.data, 0.0)
    mask = (a.data > 0.0).astype(np.float64)
    return apply_op("relu", (a,), out, lambda g: (g * mask,))


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0.0, a.data)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    return apply_op("softplus", (a,), out, lambda g: (g * sig,))


# ---------------------------------------------------------------------------
# shape ops

def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = np.broadcast_to(a.data, shape).copy()
    return apply_op("broadcast_to", (a,), out,
                    lambda g: (_unbroadcast(g, a.shape),))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a 2-d tensor, got shape {a.shape}")
    return apply_op("transpose", (a,), a.data.T.copy(), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape).copy()
    return apply_op("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat of zero tensors")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=axis))

    return apply_op("concat", tuple(parts), out, bwd)


# ---------------------------------------------------------------------------
# reductions

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.shape).copy(),)

    return apply_op("sum", (a,), np.asarray(out, dtype=np.float64), bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.data.shape[ax] for ax in axis]))
    else:
        n = a.data.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2 / n, a.shape).copy(),)

    return apply_op("mean", (a,), np.asarray(out, dtype=np.float64), bwd)


# ---------------------------------------------------------------------------
# linear algebra and row bookkeeping

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = a.data @ b.data
    return apply_op("matmul", (a, b), out, lambda g: (g @ b.data.T, a.data.T @ g))


def gather_rows(a: Tensor, indices: Sequence[int]) -> Tensor:
    idx = np.asarray(list(indices), dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"gather_rows index out of range for {a.shape[0]} rows")
    out = a.data[idx].copy()

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return apply_op("gather_rows", (a,), out, bwd)


def scatter_rows(rows: Tensor, indices: Sequence[int], num_rows: int,
                 fill_row: Optional[Tensor] = None) -> Tensor:
    """Place `rows[k]` at `indices[k]` in a fresh [num_rows x d] tensor.

    Positions not listed get `fill_row` (broadcast) or zeros.
    """
    idx = np.asarray(list(indices), dtype=np.intp)
    if idx.size != rows.shape[0]:
        raise ShapeError(f"scatter_rows: {rows.shape[0]} rows vs {idx.size} indices")
    if len(set(idx.tolist())) != idx.size:
        raise StructuralError("scatter_rows: duplicate indices")
    if idx.size and (idx.min() < 0 or idx.max() >= num_rows):
        raise ShapeError(f"scatter_rows index out of range for {num_rows} rows")
    rest = np.setdiff1d(np.arange(num_rows), idx)
    tail = rows.shape[1:]
    if fill_row is None:
        out = np.zeros((num_rows,) + tail, dtype=np.float64)
        inputs = (rows,)
    else:
        out = np.empty((num_rows,) + tail, dtype=np.float64)
        out[rest] = fill_row.data
        inputs = (rows, fill_row)
    out[idx] = rows.data

    def bwd(g):
        g_rows = g[idx].copy()
        if fill_row is None:
            return (g_rows,)
        g_fill = _unbroadcast(g[rest].sum(axis=0), fill_row.shape) if rest.size \
            else np.zeros_like(fill_row.data)
        return (g_rows, g_fill)

    return apply_op("scatter_rows", inputs, out, bwd)


# ---------------------------------------------------------------------------
# normalization and similarity

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return apply_op("softmax", (a,), out, bwd)


def layer_normalize(a: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    mu = tmean(a, axis=-1, keepdims=True)
    centered = sub(a, mu)
    var = tmean(mul(centered, centered), axis=-1, keepdims=True)
    inv = div(_lift(1.0), sqrt(add(var, _lift(eps))))
    return add(mul(mul(centered, inv), gain), shift)


def row_cosine(u: Tensor, v: Tensor) -> Tensor:
    """Cosine similarity per row of two [M x d] tensors; values clipped to [-1, 1]."""
    if u.shape != v.shape or u.data.ndim != 2:
        raise ShapeError(f"row_cosine expects matching 2-d shapes, got {u.shape} and {v.shape}")
    nu = np.linalg.norm(u.data, axis=1)
    nv = np.linalg.norm(v.data, axis=1)
    if np.any(nu == 0.0) or np.any(nv == 0.0):
        raise DegenerateInputError("row_cosine: zero-norm row")
    dot = (u.data * v.data).sum(axis=1)
    cos = np.clip(dot / (nu * nv), -1.0, 1.0)

    def bwd(g):
        gu = g[:, None] * (v.data / (nu * nv)[:, None] - u.data * (cos / (nu * nu))[:, None])
        gv = g[:, None] * (u.data / (nu * nv)[:, None] - v.data * (cos / (nv * nv))[:, None])
        return (gu, gv)

    return apply_op("row_cosine", (u, v), cos, bwd)


def cosine_similarity(u: Tensor, v: Tensor) -> Tensor:
    """Cosine similarity of two vectors; zero-norm operands are an error."""
    if u.data.ndim != 1 or v.data.ndim != 1:
        raise ShapeError("cosine_similarity expects 1-d tensors")
    c = row_cosine(reshape(u, (1, u.size)), reshape(v, (1, v.size)))
    return reshape(c, ())


def token_l2_norms(z: Tensor) -> Tensor:
    """Euclidean norm of each row of an [N x d] tensor."""
    if z.data.ndim != 2:
        raise ShapeError(f"token_l2_norms expects a 2-d tensor, got {z.shape}")
    return sqrt(tsum(mul(z, z), axis=1))


def stop_gradient(a: Tensor) -> Tensor:
    """Same values (bitwise, shared storage), no gradient contribution."""
    return Tensor(a.data, grad_tracked=False)


# ---------------------------------------------------------------------------
# backward

def backward(loss: Tensor) -> dict:
    """Reverse-sweep the record that produced `loss`.

    Returns {leaf Tensor -> gradient Tensor} for every tracked leaf that
    contributed to the loss. One sweep per record.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        raise StructuralError("backward on a detached loss (no recorded operations)")
    rec = loss.node.record
    if rec.consumed:
        raise StructuralError("backward called twice on one ComputationRecord")
    rec.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=np.float64)}
    leaves: dict[int, Tensor] = {}
    result: dict[Tensor, Tensor] = {}

    for node in reversed(rec.ops):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.grad_tracked:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if t.node is None:
                leaves[key] = t

    for key, t in leaves.items():
        result[t] = Tensor(grads[key])
    return result
