"""Dense tensors with reverse-mode autodiff on an explicit gradient tape.

float64 is the working dtype (float32 is an opt-in for speed runs). Ops are
plain numpy when no tape is active; inside a `tape_scope` every op appends a
backward rule to the active tape, and `backward()` replays the rules in
reverse creation order to accumulate gradients for watched leaves.
"""

from __future__ import annotations

import itertools
import struct
from contextlib import contextmanager

import numpy as np

_ALLOWED_DTYPES = (np.float64, np.float32)
_ids = itertools.count()


class Tensor:
    """Immutable dense array plus an identity used as the tape key."""

    __slots__ = ("data", "tid")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor construction requires finite values")
        self.data = arr
        self.tid = next(_ids)

    @classmethod
    def _wrap(cls, arr):
        # internal fast path for op outputs; finiteness is guaranteed by op guards
        t = object.__new__(cls)
        t.data = arr
        t.tid = next(_ids)
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    # arithmetic sugar
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
        return mul(self, reciprocal(as_tensor(other)))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    # method forms of the op set
    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and not isinstance(shape[0], int) else shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)


def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


class _Node:
    __slots__ = ("out_tid", "inputs", "backward")

    def __init__(self, out_tid, inputs, backward):
        self.out_tid = out_tid
        self.inputs = inputs
        self.backward = backward


class GradTape:
    """Op record in creation order (a topological order by construction).

    One tape per training step; never shared across concurrent steps. Leaves
    are the parameter tensors registered through watch().
    """

    def __init__(self):
        self.nodes = []
        self.leaves = {}  # tid -> Tensor

    def watch(self, *tensors):
        for t in tensors:
            self.leaves[t.tid] = t

    def record(self, out, inputs, backward):
        self.nodes.append(_Node(out.tid, inputs, backward))


_TAPES: list[GradTape] = []


@contextmanager
def tape_scope(tape):
    _TAPES.append(tape)
    try:
        yield tape
    finally:
        _TAPES.pop()


def active_tape():
    return _TAPES[-1] if _TAPES else None


def _record(out, inputs, backward):
    tape = active_tape()
    if tape is not None:
        tape.record(out, inputs, backward)
    return out


def backward(loss, tape, wrt=None):
    """Reverse sweep over `tape`; returns {tensor id: gradient Tensor}.

    Gradients accumulate by summation per path. By default the map covers the
    tape's watched leaves; `wrt` extends it to arbitrary intermediate tensors
    (used for activation attribution). Leaves not reachable from the loss get
    zero gradients of matching shape.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ValueError("backward requires a scalar loss tensor")
    targets = dict(tape.leaves)
    if wrt is not None:
        for t in wrt:
            targets[t.tid] = t
    grads = {loss.tid: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g_out = grads.pop(node.out_tid, None) if node.out_tid not in targets else grads.get(node.out_tid)
        if g_out is None:
            continue
        contribs = node.backward(g_out)
        for inp, contrib in zip(node.inputs, contribs):
            if contrib is None:
                continue
            prev = grads.get(inp.tid)
            grads[inp.tid] = contrib if prev is None else prev + contrib
    out = {}
    for tid, t in targets.items():
        g = grads.get(tid)
        out[tid] = Tensor._wrap(np.zeros_like(t.data) if g is None else np.array(g, copy=True))
    return out


def finite_difference(f, x, h=1e-5):
    """Central-difference gradient oracle: (f(x+h e_i) - f(x-h e_i)) / 2h."""
    x = as_tensor(x)
    grad = np.zeros_like(x.data)
    flat = grad.reshape(-1)
    base = x.data.reshape(-1)
    for i in range(base.size):
        bumped = base.copy()
        bumped[i] = base[i] + h
        fp = f(Tensor._wrap(bumped.reshape(x.shape)))
        bumped[i] = base[i] - h
        fm = f(Tensor._wrap(bumped.reshape(x.shape)))
        fp = float(fp.data) if isinstance(fp, Tensor) else float(fp)
        fm = float(fm.data) if isinstance(fm, Tensor) else float(fm)
        flat[i] = (fp - fm) / (2.0 * h)
    return Tensor._wrap(grad)


# ---------------------------------------------------------------------------
# broadcasting (numpy trailing-axes rules; mismatches are shape errors)

def _broadcast_check(sa, sb, op):
    try:
        return np.broadcast_shapes(sa, sb)
    except ValueError:
        raise ValueError(f"{op}: shapes {sa} and {sb} do not broadcast") from None


def _unbroadcast(g, shape):
    # reduce an upstream gradient back to the pre-broadcast shape
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / reduction ops

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a.shape, b.shape, "add")
    out = Tensor._wrap(a.data + b.data)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), bwd)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a.shape, b.shape, "sub")
    out = Tensor._wrap(a.data - b.data)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(out, (a, b), bwd)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a.shape, b.shape, "mul")
    out = Tensor._wrap(a.data * b.data)

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), bwd)


def matmul(a, b):
    """a @ b for a with ndim >= 1 and b with ndim in {1, 2}."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 1 or b.data.ndim not in (1, 2):
        raise ValueError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    ka = a.shape[-1]
    kb = b.shape[0]
    if ka != kb:
        raise ValueError(f"matmul: inner dims differ for shapes {a.shape} and {b.shape}")
    out = Tensor._wrap(np.matmul(a.data, b.data))

    def bwd(g):
        b2 = b.data if b.data.ndim == 2 else b.data[:, None]
        g2 = g if b.data.ndim == 2 else g[..., None]
        a2 = a.data if a.data.ndim >= 2 else a.data[None, :]
        ga = np.matmul(g2, b2.T).reshape(a.shape)
        gflat = g2.reshape(-1, b2.shape[1])
        gb = np.matmul(a2.reshape(-1, ka).T, gflat)
        return ga, gb.reshape(b.shape)

    return _record(out, (a, b), bwd)


def exp(a):
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        res = np.exp(a.data)
    if not np.all(np.isfinite(res)):
        raise ValueError("exp: result overflows to non-finite values")
    out = Tensor._wrap(res)

    def bwd(g):
        return (g * res,)

    return _record(out, (a,), bwd)


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log: requires strictly positive input")
    out = Tensor._wrap(np.log(a.data))

    def bwd(g):
        return (g / a.data,)

    return _record(out, (a,), bwd)


def reciprocal(a):
    a = as_tensor(a)
    if np.any(a.data == 0):
        raise ValueError("reciprocal: zero input")
    res = 1.0 / a.data
    out = Tensor._wrap(res)

    def bwd(g):
        return (-g * res * res,)

    return _record(out, (a,), bwd)


def relu(a):
    a = as_tensor(a)
    out = Tensor._wrap(np.maximum(a.data, 0.0))

    def bwd(g):
        return (g * (a.data > 0),)

    return _record(out, (a,), bwd)


def softmax(a):
    """Softmax over the last axis, shifted by the row max for stability."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor._wrap(p)

    def bwd(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - inner),)

    return _record(out, (a,), bwd)


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tensor_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.data.ndim)
    out = Tensor._wrap(a.data.sum(axis=axes, keepdims=keepdims))

    def bwd(g):
        if not keepdims:
            shape = list(a.shape)
            for ax in axes:
                shape[ax] = 1
            g = g.reshape(shape)
        return (np.broadcast_to(g, a.shape),)

    return _record(out, (a,), bwd)


def tensor_mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.data.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out = Tensor._wrap(a.data.mean(axis=axes, keepdims=keepdims))

    def bwd(g):
        if not keepdims:
            shape = list(a.shape)
            for ax in axes:
                shape[ax] = 1
            g = g.reshape(shape)
        return (np.broadcast_to(g / count, a.shape),)

    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# layout ops

def reshape(a, shape):
    a = as_tensor(a)
    if isinstance(shape, int):
        shape = (shape,)
    out = Tensor._wrap(a.data.reshape(shape))

    def bwd(g):
        return (g.reshape(a.shape),)

    return _record(out, (a,), bwd)


def transpose(a, axes=None):
    a = as_tensor(a)
    out = Tensor._wrap(np.transpose(a.data, axes))

    def bwd(g):
        inv = None if axes is None else np.argsort(axes)
        return (np.transpose(g, inv),)

    return _record(out, (a,), bwd)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        s = list(t.shape)
        if len(s) != len(ref) or any(i != axis and s[i] != ref[i] for i in range(len(s))):
            raise ValueError(f"concat: shape {tuple(s)} incompatible with {tuple(ref)} on axis {axis}")
    out = Tensor._wrap(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _record(out, tuple(tensors), bwd)


def slice_axis(a, axis, start, stop):
    a = as_tensor(a)
    axis = axis % a.data.ndim
    idx = tuple(slice(None) if i != axis else slice(start, stop) for i in range(a.data.ndim))
    out = Tensor._wrap(a.data[idx].copy())

    def bwd(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _record(out, (a,), bwd)


def gather(a, indices, axis=0):
    """Index-select along `axis`.

    1-D `indices` selects whole slices (np.take). `indices` with the same
    rank as `a` gathers elementwise along the axis (np.take_along_axis);
    rows may carry distinct index orders, which is how per-sample token
    permutations are applied in batch.
    """
    a = as_tensor(a)
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ValueError("gather: indices must be integers")
    axis = axis % a.data.ndim
    if idx.ndim == 1:
        if idx.size and (idx.min() < 0 or idx.max() >= a.shape[axis]):
            raise ValueError(f"gather: index out of range for axis size {a.shape[axis]}")
        out = Tensor._wrap(np.take(a.data, idx, axis=axis))

        def bwd(g):
            gm = np.moveaxis(g, axis, 0)
            acc = np.zeros_like(np.moveaxis(a.data, axis, 0))
            np.add.at(acc, idx, gm)
            return (np.moveaxis(acc, 0, axis),)

        return _record(out, (a,), bwd)

    if idx.ndim != a.data.ndim:
        raise ValueError(f"gather: indices rank {idx.ndim} does not match tensor rank {a.data.ndim}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[axis]):
        raise ValueError(f"gather: index out of range for axis size {a.shape[axis]}")
    out = Tensor._wrap(np.take_along_axis(a.data, idx, axis=axis))

    def bwd(g):
        gm = np.ascontiguousarray(np.moveaxis(g, axis, -1))
        im = np.broadcast_to(np.moveaxis(idx, axis, -1), gm.shape)
        # accumulate in a contiguous moved-layout buffer, then move back
        moved_shape = gm.shape[:-1] + (a.shape[axis],)
        acc = np.zeros(moved_shape, dtype=a.data.dtype)
        k = acc.shape[-1]
        rows = gm.size // gm.shape[-1]
        lin = (np.arange(rows)[:, None] * k + im.reshape(rows, -1)).ravel()
        np.add.at(acc.reshape(-1), lin, gm.ravel())
        return (np.moveaxis(acc, -1, axis),)

    return _record(out, (a,), bwd)


def reverse(a, axis):
    a = as_tensor(a)
    out = Tensor._wrap(np.flip(a.data, axis=axis).copy())

    def bwd(g):
        return (np.flip(g, axis=axis).copy(),)

    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# stable composites

def logsumexp(a):
    """log(sum(exp(a))) over the last axis, keepdims; max-shifted."""
    a = as_tensor(a)
    m = Tensor._wrap(a.data.max(axis=-1, keepdims=True))  # constant shift
    return add(log(tensor_sum(exp(sub(a, m)), axis=-1, keepdims=True)), m)


def log_softmax(a):
    return sub(a, logsumexp(a))


def softplus(a):
    # log(1 + e^x) = relu(x) + log(1 + e^-|x|)
    a = as_tensor(a)
    mag = add(relu(a), relu(mul(a, -1.0)))
    return add(relu(a), log(add(exp(mul(mag, -1.0)), 1.0)))


def sigmoid(a):
    return exp(mul(softplus(mul(a, -1.0)), -1.0))


def silu(a):
    return mul(a, sigmoid(a))


# ---------------------------------------------------------------------------
# TNSR1 serialization: magic `TNSR`, version u8=1, dtype tag u8 (0=f64,
# 1=f32), rank u8, dims u32 little-endian, raw row-major payload.

_MAGIC = b"TNSR"
_DTYPE_TAGS = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}
_TAG_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}


def write_tensor(fh, t):
    t = as_tensor(t)
    arr = np.asarray(t.data, order="C")  # keeps 0-d rank, unlike ascontiguousarray
    fh.write(_MAGIC)
    fh.write(struct.pack("<BBB", 1, _DTYPE_TAGS[arr.dtype], arr.ndim))
    for dim in arr.shape:
        fh.write(struct.pack("<I", dim))
    fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_tensor(fh):
    head = fh.read(7)
    if len(head) < 7:
        raise ValueError("tensor record: truncated header")
    if head[:4] != _MAGIC:
        raise ValueError(f"tensor record: bad magic {head[:4]!r}")
    version, tag, rank = struct.unpack("<BBB", head[4:])
    if version != 1:
        raise ValueError(f"tensor record: unsupported version {version}")
    if tag not in _TAG_DTYPES:
        raise ValueError(f"tensor record: unknown dtype tag {tag}")
    raw_dims = fh.read(4 * rank)
    if len(raw_dims) < 4 * rank:
        raise ValueError("tensor record: truncated dims")
    dims = struct.unpack(f"<{rank}I", raw_dims) if rank else ()
    dtype = _TAG_DTYPES[tag]
    count = int(np.prod(dims)) if dims else 1
    payload = fh.read(count * dtype.itemsize)
    if len(payload) < count * dtype.itemsize:
        raise ValueError("tensor record: truncated payload")
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
    return Tensor(arr)


def save_tensor(path, t):
    with open(path, "wb") as fh:
        write_tensor(fh, t)


def load_tensor(path):
    with open(path, "rb") as fh:
        return read_tensor(fh)
