"""Dense float64 tensors with a reverse-mode gradient tape.

Every forward op checks its output for NaN/Inf. Ops only record onto a tape
when one is active (``with Tape() as tape:``) and at least one input is
tracked; outside a tape everything runs as plain numpy.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "NumericError", "TapeError", "Tensor", "Tape", "GradientMap",
    "create", "tensor", "constant", "parameter", "detach", "backward",
    "add", "sub", "mul", "neg", "scale", "tanh", "sigmoid", "relu", "exp", "log",
    "elementwise", "matmul", "transpose", "reshape", "concat",
    "reduce", "sum", "mean", "log_softmax", "softmax",
    "take_rows", "gather_time", "slice_last", "record_op",
]


class NumericError(FloatingPointError):
    """A forward op produced NaN or Inf, or got an input outside its domain."""


class TapeError(RuntimeError):
    pass


_ACTIVE: list["Tape"] = []


class Tensor:
    """A float64 array plus an optional handle into the active tape.

    ``requires_grad`` marks a trainable leaf. ``detached`` leaves are treated
    as constants even when they are trainable elsewhere (fixed teachers).
    """

    __slots__ = ("data", "requires_grad", "detached", "_tape", "_node", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.requires_grad = requires_grad
        self.detached = False
        self._tape = None
        self._node = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def values(self):
        return self.data.ravel().tolist()

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ValueError("item() needs a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def create(shape, values) -> Tensor:
    """Build a tensor from a shape and a flat row-major value sequence."""
    shape = tuple(int(s) for s in shape)
    if not shape or any(s <= 0 for s in shape):
        raise ValueError(f"shape must be a non-empty list of positive dims, got {shape}")
    vals = np.asarray(values, dtype=np.float64).ravel()
    if vals.size != int(np.prod(shape)):
        raise ValueError(f"length mismatch: {vals.size} values for shape {shape}")
    return Tensor(vals.reshape(shape))


def tensor(data) -> Tensor:
    return Tensor(data)


constant = tensor


def parameter(data, name=None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def detach(t) -> Tensor:
    """Constant view sharing storage with ``t``; never receives gradient."""
    out = Tensor.__new__(Tensor)
    out.data = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    out.requires_grad = False
    out.detached = True
    out._tape = None
    out._node = None
    out.name = getattr(t, "name", None)
    return out


class GradientMap(dict):
    """Tensor -> gradient array. Missing entries mean zero gradient."""

    def grad_of(self, t: Tensor) -> np.ndarray:
        g = self.get(t)
        return np.zeros_like(t.data) if g is None else g


class _Node:
    __slots__ = ("kind", "inputs", "backward", "tensor")

    def __init__(self, kind, inputs, backward, tensor):
        self.kind = kind
        self.inputs = inputs
        self.backward = backward
        self.tensor = tensor


class Tape:
    """Ordered record of ops for one forward pass.

    Nodes are appended in execution order, so the list is topologically
    sorted. A tape can be consumed by ``backward`` exactly once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._leaf_ids: dict[int, int] = {}
        self.consumed = False

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def _handle(self, t: Tensor):
        """Node index for ``t`` on this tape, or None if it is a constant."""
        if t._tape is self:
            return t._node
        if t.requires_grad and not t.detached:
            idx = self._leaf_ids.get(id(t))
            if idx is None:
                idx = len(self.nodes)
                self.nodes.append(_Node("leaf", (), None, t))
                self._leaf_ids[id(t)] = idx
            return idx
        return None

    def backward(self, loss: Tensor) -> GradientMap:
        if loss.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise TapeError("loss was not recorded on this tape")
        if self.consumed:
            raise TapeError("tape already consumed; re-run the forward pass")
        self.consumed = True
        grads: dict[int, np.ndarray] = {loss._node: np.ones_like(loss.data)}
        out = GradientMap()
        for idx in range(loss._node, -1, -1):
            g = grads.pop(idx, None)
            if g is None:
                continue
            node = self.nodes[idx]
            if node.kind == "leaf":
                out[node.tensor] = g
                continue
            in_grads = node.backward(g)
            for h, gi in zip(node.inputs, in_grads):
                if h is None or gi is None:
                    continue
                prev = grads.get(h)
                grads[h] = gi if prev is None else prev + gi
        return out


def backward(loss: Tensor) -> GradientMap:
    """Gradients of a scalar tape-recorded loss w.r.t. every tracked leaf."""
    tape = loss._tape
    if tape is None:
        raise TapeError("loss is not on a tape (was it computed inside `with Tape()`?)")
    return tape.backward(loss)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr, kind):
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {kind}")


def record_op(kind, out_data, inputs, backward_fn) -> Tensor:
    """Wrap ``out_data`` as a Tensor and record it if any input is tracked.

    ``backward_fn(g, needs)`` returns one gradient (or None) per input;
    ``needs[i]`` says whether input ``i`` is tracked on the tape.
    """
    _check_finite(out_data, kind)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = False
    out.detached = False
    out._tape = None
    out._node = None
    out.name = None
    if not _ACTIVE:
        return out
    tape = _ACTIVE[-1]
    handles = tuple(tape._handle(t) for t in inputs)
    if all(h is None for h in handles):
        return out
    needs = tuple(h is not None for h in handles)
    out._tape = tape
    out._node = len(tape.nodes)
    tape.nodes.append(_Node(kind, handles, lambda g: backward_fn(g, needs), out))
    return out


# ----------------------------------------------------------------------------
# elementwise

def _broadcast_kind(a, b):
    if a.shape == b.shape:
        return "same"
    if b.ndim == 1 and a.shape[-1:] == b.shape:
        return "trail_b"
    if a.ndim == 1 and b.shape[-1:] == a.shape:
        return "trail_a"
    if b.size == 1:
        return "scalar_b"
    if a.size == 1:
        return "scalar_a"
    raise ValueError(f"shape mismatch {a.shape} vs {b.shape}: only trailing-vector broadcast is supported")


def _reduce_to(g, kind, which):
    if kind == "same":
        return g
    if (kind == "trail_b" and which == 1) or (kind == "trail_a" and which == 0):
        return g.reshape(-1, g.shape[-1]).sum(axis=0)
    if (kind == "scalar_b" and which == 1) or (kind == "scalar_a" and which == 0):
        return np.array([g.sum()])
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _broadcast_kind(a.data, b.data)
    return record_op("add", a.data + b.data, (a, b),
                     lambda g, n: (_reduce_to(g, kind, 0) if n[0] else None,
                                   _reduce_to(g, kind, 1) if n[1] else None))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _broadcast_kind(a.data, b.data)
    return record_op("sub", a.data - b.data, (a, b),
                     lambda g, n: (_reduce_to(g, kind, 0) if n[0] else None,
                                   -_reduce_to(g, kind, 1) if n[1] else None))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _broadcast_kind(a.data, b.data)
    ad, bd = a.data, b.data
    return record_op("mul", ad * bd, (a, b),
                     lambda g, n: (_reduce_to(g * bd, kind, 0) if n[0] else None,
                                   _reduce_to(g * ad, kind, 1) if n[1] else None))


def neg(a) -> Tensor:
    return record_op("neg", -a.data, (a,), lambda g, n: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar."""
    c = float(c)
    return record_op("scale", a.data * c, (a,), lambda g, n: (g * c,))


def tanh(a) -> Tensor:
    y = np.tanh(a.data)
    return record_op("tanh", y, (a,), lambda g, n: (g * (1.0 - y * y),))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    y = _sigmoid(a.data)
    return record_op("sigmoid", y, (a,), lambda g, n: (g * y * (1.0 - y),))


def relu(a) -> Tensor:
    # derivative at exactly 0 is 0
    m = a.data > 0
    return record_op("relu", np.where(m, a.data, 0.0), (a,), lambda g, n: (g * m,))


def exp(a) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return record_op("exp", y, (a,), lambda g, n: (g * y,))


def log(a) -> Tensor:
    x = a.data
    if (x <= 0).any():
        raise NumericError("log of non-positive input")
    return record_op("log", np.log(x), (a,), lambda g, n: (g / x,))


_UNARY = {"tanh": tanh, "sigmoid": sigmoid, "relu": relu, "exp": exp, "log": log}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, a, b=None) -> Tensor:
    if op in _UNARY:
        if b is not None:
            raise ValueError(f"{op} is unary")
        return _UNARY[op](_as_tensor(a))
    if op in _BINARY:
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return _BINARY[op](a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


# ----------------------------------------------------------------------------
# linear algebra and shape ops

def matmul(a, b) -> Tensor:
    """a[..., n, k] @ b[k, m] or batched a[B, n, k] @ b[B, k, m]."""
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul dimension mismatch {ad.shape} @ {bd.shape}")
    if bd.ndim > 2 and bd.shape[:-2] != ad.shape[:-2]:
        raise ValueError(f"batched matmul needs equal leading dims, got {ad.shape} @ {bd.shape}")
    out = ad @ bd

    def bw(g, n):
        ga = g @ np.swapaxes(bd, -1, -2) if n[0] else None
        gb = None
        if n[1]:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return record_op("matmul", out, (a, b), bw)


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    return record_op("transpose", np.swapaxes(a.data, -1, -2), (a,),
                     lambda g, n: (np.swapaxes(g, -1, -2),))


def reshape(a, shape) -> Tensor:
    old = a.data.shape
    return record_op("reshape", a.data.reshape(shape), (a,), lambda g, n: (g.reshape(old),))


def concat(tensors, axis=-1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return record_op("concat", out, tuple(tensors),
                     lambda g, n: tuple(np.split(g, splits, axis=axis)))


def take_rows(table, ids) -> Tensor:
    """table[V, d] indexed by an integer array of any shape -> ids.shape + (d,)."""
    ids = np.asarray(ids, dtype=np.int64)
    V = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise IndexError(f"row id out of range [0, {V})")

    def bw(g, n):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        return (gt,)

    return record_op("take_rows", table.data[ids], (table,), bw)


def gather_time(x, idx) -> Tensor:
    """x[B, T, D] gathered along time with per-row indices idx[B, n]."""
    idx = np.asarray(idx, dtype=np.int64)
    B = x.data.shape[0]
    rows = np.arange(B)[:, None]
    out = x.data[rows, idx]

    def bw(g, n):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (np.broadcast_to(rows, idx.shape), idx), g)
        return (gx,)

    return record_op("gather_time", out, (x,), bw)


# ----------------------------------------------------------------------------
# reductions and normalisation

def reduce(op: str, t, axis=None) -> Tensor:
    t = _as_tensor(t)
    x = t.data
    if axis is not None:
        if not -x.ndim <= axis < x.ndim:
            raise ValueError(f"invalid axis {axis} for rank {x.ndim}")
        axis = axis % x.ndim
    if op == "sum":
        out = x.sum(axis=axis)
        factor = 1.0
    elif op == "mean":
        out = x.mean(axis=axis)
        factor = 1.0 / (x.size if axis is None else x.shape[axis])
    else:
        raise ValueError(f"unknown reduction {op!r}")
    out = np.asarray(out, dtype=np.float64)
    if out.ndim == 0:
        out = out.reshape(1)

    def bw(g, n):
        if axis is None:
            return (np.full(x.shape, g.reshape(-1)[0] * factor),)
        return (np.broadcast_to(np.expand_dims(g, axis) * factor, x.shape).copy(),)

    return record_op(op, out, (t,), bw)


def sum(t, axis=None) -> Tensor:  # noqa: A001
    return reduce("sum", t, axis)


def mean(t, axis=None) -> Tensor:
    return reduce("mean", t, axis)


def log_softmax(t) -> Tensor:
    """Log-softmax over the last axis, max-shifted."""
    x = t.data
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse
    p = np.exp(y)

    def bw(g, n):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return record_op("log_softmax", y, (t,), bw)


def softmax(t) -> Tensor:
    x = t.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g, n):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return record_op("softmax", p, (t,), bw)


def slice_last(t, start: int, stop: int) -> Tensor:
    """t[..., start:stop]."""
    shape = t.data.shape

    def bw(g, n):
        gt = np.zeros(shape)
        gt[..., start:stop] = g
        return (gt,)

    return record_op("slice", t.data[..., start:stop].copy(), (t,), bw)
