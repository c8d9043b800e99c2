"""Reverse-mode automatic differentiation over dense float64 tensors.

Ops execute eagerly on numpy arrays. While a Graph is active (used as a
context manager) and at least one input requires gradients, each op appends
a node to the tape; backward() replays the tape once in reverse order,
accumulating gradients keyed by tensor identity. Execution order is the
topological order, so a single reverse sweep is exact.

Everything is float64. Any op producing a NaN/Inf raises immediately.
"""

import os
import struct

import numpy as np

_GRAPH_STACK = []


def _active_graph():
    return _GRAPH_STACK[-1] if _GRAPH_STACK else None


class Tensor:
    """Dense float64 array with optional gradient tracking.

    `grad` is populated (as a plain ndarray) by backward() for leaf tensors
    that require gradients.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=np.float64, order="C")
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError("tensor initialized with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def constant(data):
    """Tensor that never tracks gradients (wraps without copy when possible)."""
    if isinstance(data, Tensor):
        return data if not data.requires_grad else Tensor(data.data)
    t = Tensor.__new__(Tensor)
    arr = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError("constant() given non-finite values")
    t.data = arr
    t.requires_grad = False
    t.grad = None
    return t


class Graph:
    """Execution tape: an ordered record of the primitive ops that ran.

    Use as a context manager around the forward pass; pass to backward()
    afterwards. A graph is consumed by backward and cannot be reused.
    """

    def __init__(self):
        self._nodes = []
        self._consumed = False

    def __enter__(self):
        _GRAPH_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _GRAPH_STACK.pop()
        return False

    def __len__(self):
        return len(self._nodes)


def _result(out_arr, inputs, vjp, opname):
    """Wrap an op output, recording it on the active graph when needed."""
    # cheap screen first: any NaN/inf poisons the sum; a finite-but-
    # overflowing sum is the one false alarm, settled by the full check
    if not np.isfinite(out_arr.sum()) and not np.all(np.isfinite(out_arr)):
        raise FloatingPointError(f"non-finite values produced by {opname}")
    out = Tensor.__new__(Tensor)
    out.data = out_arr
    out.grad = None
    g = _active_graph()
    if g is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        g._nodes.append((out, tuple(inputs), vjp))
    else:
        out.requires_grad = False
    return out


def backward(graph, loss, params=None):
    """Reverse sweep over the tape; returns gradients keyed by parameter name.

    Sets `.grad` on every leaf tensor with requires_grad reached from `loss`.
    When `params` (a ModelParams) is given, returns {name: grad array} with
    zeros for parameters the loss does not depend on. The graph is consumed.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
    if graph._consumed:
        raise RuntimeError("graph already consumed by backward")
    graph._consumed = True

    grads = {id(loss): np.ones_like(loss.data)}
    refs = {id(loss): loss}
    for out, inputs, vjp in reversed(graph._nodes):
        g = grads.pop(id(out), None)
        refs.pop(id(out), None)
        if g is None:
            continue
        for t, gi in zip(inputs, vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            tid = id(t)
            acc = grads.get(tid)
            grads[tid] = gi if acc is None else acc + gi
            refs[tid] = t
    graph._nodes = []

    for tid, g in grads.items():
        refs[tid].grad = g

    if params is None:
        return None
    out = {}
    for name, t in params.items():
        g = grads.get(id(t))
        out[name] = g if g is not None else np.zeros_like(t.data)
    return out


# ---------------------------------------------------------------------------
# primitives

def _as2d(t, opname):
    if t.data.ndim != 2:
        raise ValueError(f"{opname}: expected 2-D tensor, got shape {t.data.shape}")


def linear(x, w, b):
    """y = x @ w + b for x (B,I), w (I,O), b (O,)."""
    _as2d(x, "linear")
    _as2d(w, "linear")
    if b.data.ndim != 1:
        raise ValueError(f"linear: bias must be 1-D, got shape {b.data.shape}")
    if x.data.shape[1] != w.data.shape[0] or w.data.shape[1] != b.data.shape[0]:
        raise ValueError(
            f"linear: shapes do not conform: x {x.data.shape}, w {w.data.shape}, b {b.data.shape}"
        )
    xd, wd = x.data, w.data
    out = xd @ wd
    out += b.data

    def vjp(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    return _result(out, (x, w, b), vjp, "linear")


def _check_broadcast(a, b, opname):
    # only scalar<->tensor and equal-shape broadcasting are supported
    if a.data.shape == b.data.shape:
        return
    if a.data.size == 1 or b.data.size == 1:
        return
    raise ValueError(f"{opname}: incompatible shapes {a.data.shape} and {b.data.shape}")


def _reduce_to(g, shape):
    if g.shape == shape:
        return g
    return g.sum().reshape(shape)


def add(a, b):
    _check_broadcast(a, b, "add")
    sa, sb = a.data.shape, b.data.shape

    def vjp(g):
        return _reduce_to(g, sa), _reduce_to(g, sb)

    return _result(a.data + b.data, (a, b), vjp, "add")


def sub(a, b):
    _check_broadcast(a, b, "sub")
    sa, sb = a.data.shape, b.data.shape

    def vjp(g):
        return _reduce_to(g, sa), _reduce_to(-g, sb)

    return _result(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b):
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def vjp(g):
        return _reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)

    return _result(ad * bd, (a, b), vjp, "mul")


def neg(x):
    def vjp(g):
        return (-g,)

    return _result(-x.data, (x,), vjp, "neg")


def square(x):
    xd = x.data

    def vjp(g):
        return (2.0 * xd * g,)

    return _result(xd * xd, (x,), vjp, "square")


def relu(x):
    mask = x.data > 0.0  # relu'(0) := 0

    def vjp(g):
        return (g * mask,)

    return _result(np.where(mask, x.data, 0.0), (x,), vjp, "relu")


def scale(x, c):
    """Multiply by a python float constant."""
    c = float(c)

    def vjp(g):
        return (g * c,)

    return _result(x.data * c, (x,), vjp, "scale")


def softmax_over_axis(x, axis):
    """Numerically stable softmax along `axis`; output sums to 1 there."""
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ValueError(f"softmax_over_axis: axis {axis} invalid for shape {x.data.shape}")
    y = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), vjp, "softmax_over_axis")


def tensor_sum(x, axis=None):
    """Sum along one axis, or over all elements (axis=None -> 0-d tensor)."""
    shape = x.data.shape
    if axis is None:
        out = np.asarray(x.data.sum())

        def vjp(g):
            return (np.broadcast_to(g, shape).copy(),)

    else:
        out = x.data.sum(axis=axis)

        def vjp(g):
            return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _result(out, (x,), vjp, "sum")


def tensor_mean(x):
    return scale(tensor_sum(x), 1.0 / x.data.size)


def reshape(x, shape):
    old = x.data.shape

    def vjp(g):
        return (g.reshape(old),)

    return _result(x.data.reshape(shape), (x,), vjp, "reshape")


def concat(tensors, axis=-1):
    """Concatenate along an axis; gradient splits back."""
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(out, tuple(tensors), vjp, "concat")


def _scatter_rows(n, idx, g):
    """out[idx[t]] += g[t] for out of n rows, via one flat bincount.

    Much faster than np.add.at, which falls back to slow buffered fancy
    indexing; bincount accumulates sequentially in C.
    """
    g = np.asarray(g, dtype=np.float64)
    if g.ndim == 1:
        return np.bincount(idx, weights=g, minlength=n)
    flat = g.reshape(idx.shape[0], -1)
    f = flat.shape[1]
    keys = (idx[:, None] * f + np.arange(f)[None, :]).ravel()
    out = np.bincount(keys, weights=flat.ravel(), minlength=n * f)
    return out.reshape((n,) + g.shape[1:])


def _segment_reduce(ufunc, values, offsets, fill):
    """Per-segment ufunc.reduce over contiguous rows; empty segments -> fill.

    reduceat alone mishandles empty segments (it returns the element at the
    segment start), so those rows are overwritten afterwards.
    """
    counts = np.diff(offsets)
    nq = len(counts)
    t = values.shape[0]
    if t == 0:
        return np.full((nq,) + values.shape[1:], fill)
    starts = np.minimum(offsets[:-1], t - 1)
    out = ufunc.reduceat(values, starts, axis=0)
    out[counts == 0] = fill
    return out


def _segment_sum(values, offsets):
    return _segment_reduce(np.add, values, offsets, 0.0)


def gather_rows(x, idx):
    """Select rows of x (N,...) by an integer index array (M,)."""
    idx = np.asarray(idx, dtype=np.int64)
    n = x.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather_rows: index out of range [0,{n})")

    def vjp(g):
        return (_scatter_rows(n, idx, g),)

    return _result(x.data[idx], (x,), vjp, "gather_rows")


def take_column(x, j):
    """x (B,C) -> (B,) column j."""
    _as2d(x, "take_column")
    shape = x.data.shape

    def vjp(g):
        z = np.zeros(shape)
        z[:, j] = g
        return (z,)

    return _result(x.data[:, j].copy(), (x,), vjp, "take_column")


def _index_arrays(index):
    """Accept a NeighborIndex-like object, an (Q,K) array, or (offsets, flat)."""
    if hasattr(index, "mode"):
        if index.mode == "fixed_k":
            return "fixed", np.asarray(index.indices, dtype=np.int64), None
        return "variable", np.asarray(index.flat, dtype=np.int64), np.asarray(
            index.offsets, dtype=np.int64
        )
    if isinstance(index, tuple):
        offsets, flat = index
        return "variable", np.asarray(flat, dtype=np.int64), np.asarray(offsets, dtype=np.int64)
    return "fixed", np.asarray(index, dtype=np.int64), None


def gather_pool(values, weights, index):
    """Per-query weighted sum of support rows of `values`.

    Fixed mode: index (Q,K) into values (N,F); weights (Q,K) or (Q,K,F).
    Variable mode: index = (offsets, flat) or a variable NeighborIndex; the
    flat list selects values rows per query segment; weights are flat (T,)
    or (T,F). Empty segments yield zero rows. Differentiable w.r.t. both
    values and weights.
    """
    mode, idx, offsets = _index_arrays(index)
    n, f = values.data.shape
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather_pool: index out of range [0,{n})")
    vd, wd = values.data, weights.data

    if mode == "fixed":
        q, k = idx.shape
        gathered = vd[idx]  # (Q,K,F)
        if wd.ndim == 2:
            out = np.einsum("qk,qkf->qf", wd, gathered)
        else:
            out = np.einsum("qkf,qkf->qf", wd, gathered)

        def vjp(g):
            w3 = wd[:, :, None] if wd.ndim == 2 else wd
            gpair = w3 * g[:, None, :]  # (Q,K,F)
            gv = _scatter_rows(n, idx.ravel(), gpair.reshape(q * k, f))
            gw_full = gathered * g[:, None, :]
            gw = gw_full.sum(axis=2) if wd.ndim == 2 else gw_full
            return gv, gw

        return _result(out, (values, weights), vjp, "gather_pool")

    counts = np.diff(offsets)
    nq = len(counts)
    seg = np.repeat(np.arange(nq), counts)
    gathered = vd[idx]  # (T,F)
    w2 = wd[:, None] if wd.ndim == 1 else wd
    contrib = w2 * gathered
    out = _segment_sum(contrib, offsets)

    def vjp(g):
        grow = g[seg]  # (T,F)
        gv = _scatter_rows(n, idx, w2 * grow)
        gw_full = gathered * grow
        gw = gw_full.sum(axis=1) if wd.ndim == 1 else gw_full
        return gv, gw

    return _result(out, (values, weights), vjp, "gather_pool")


def segment_softmax(x, offsets):
    """Row-wise softmax within contiguous segments of x (T,C).

    offsets has Q+1 entries; segment q is rows [offsets[q], offsets[q+1]).
    Each segment's rows sum to 1 per channel. Empty segments are permitted.
    """
    offsets = np.asarray(offsets, dtype=np.int64)
    counts = np.diff(offsets)
    if counts.min(initial=0) < 0 or (counts.sum() != x.data.shape[0]):
        raise ValueError("segment_softmax: offsets inconsistent with input rows")
    nq = len(counts)
    seg = np.repeat(np.arange(nq), counts)
    maxes = _segment_reduce(np.maximum, x.data, offsets, -np.inf)
    e = np.exp(x.data - maxes[seg])
    denom = _segment_sum(e, offsets)
    y = e / denom[seg]

    def vjp(g):
        dots = _segment_sum(g * y, offsets)
        return (y * (g - dots[seg]),)

    return _result(y, (x,), vjp, "segment_softmax")


def _check_labels(labels):
    lab = np.asarray(labels, dtype=np.float64)
    if not np.all((lab == 0.0) | (lab == 1.0)):
        raise ValueError("labels must be binary (0 or 1)")
    return lab


def binary_cross_entropy(pred, labels):
    """Mean BCE from probabilities in (0,1); logs clamped against underflow."""
    y = _check_labels(labels)
    p = pred.data
    n = p.size
    tiny = 1e-300
    val = -(y * np.log(np.maximum(p, tiny)) + (1.0 - y) * np.log(np.maximum(1.0 - p, tiny)))
    out = np.asarray(val.mean())

    def vjp(g):
        denom = np.maximum(p * (1.0 - p), tiny)
        return (float(g) * (p - y) / denom / n,)

    return _result(out, (pred,), vjp, "binary_cross_entropy")


def two_class_cross_entropy(logits, labels):
    """Mean cross-entropy from (Q,2) logits; the logit-space BCE form."""
    _as2d(logits, "two_class_cross_entropy")
    y = _check_labels(labels).astype(np.int64)
    ld = logits.data
    n = ld.shape[0]
    m = ld.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(ld - m).sum(axis=1))
    out = np.asarray((lse - ld[np.arange(n), y]).mean())
    sm = np.exp(ld - m)
    sm /= sm.sum(axis=1, keepdims=True)

    def vjp(g):
        gl = sm.copy()
        gl[np.arange(n), y] -= 1.0
        return (float(g) * gl / n,)

    return _result(out, (logits,), vjp, "two_class_cross_entropy")


# ---------------------------------------------------------------------------
# parameters and checkpoints

class ModelParams:
    """Named, ordered collection of learnable tensors.

    Names are hierarchical (dot-separated) and unique. Serialization to the
    checkpoint format round-trips bit-exactly.
    """

    def __init__(self):
        self._by_name = {}

    def register(self, name, tensor):
        if name in self._by_name:
            raise ValueError(f"duplicate parameter name: {name}")
        if not isinstance(tensor, Tensor):
            tensor = Tensor(tensor, requires_grad=True)
        self._by_name[name] = tensor
        return tensor

    def __getitem__(self, name):
        return self._by_name[name]

    def __contains__(self, name):
        return name in self._by_name

    def __iter__(self):
        return iter(self._by_name)

    def __len__(self):
        return len(self._by_name)

    def names(self):
        return list(self._by_name)

    def items(self):
        return self._by_name.items()

    def tensors(self):
        return list(self._by_name.values())

    def count(self):
        return sum(t.data.size for t in self._by_name.values())

    def count_by_prefix(self):
        """Element counts grouped by the first name component."""
        out = {}
        for name, t in self._by_name.items():
            key = name.split(".", 1)[0]
            out[key] = out.get(key, 0) + t.data.size
        return out

    def save(self, path):
        save_checkpoint(path, {n: t.data for n, t in self._by_name.items()})

    @classmethod
    def load(cls, path):
        params = cls()
        for name, arr in load_checkpoint(path).items():
            params.register(name, Tensor(arr, requires_grad=True))
        return params


CHECKPOINT_MAGIC = b"MXRC"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed checkpoint file; `offset` is the failing byte position."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def save_checkpoint(path, arrays):
    """Write name->array map; entries sorted by name, atomic rename."""
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype=np.float64)
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype("<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path):
    with open(path, "rb") as f:
        blob = f.read()
    pos = 0

    def need(n, what):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"truncated checkpoint: expected {what}", pos)
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    if need(4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic bytes (not a MXRC checkpoint)", 0)
    (version,) = struct.unpack("<I", need(4, "version"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}", 4)

    arrays = {}
    while pos < len(blob):
        (name_len,) = struct.unpack("<I", need(4, "name length"))
        name = need(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", need(4, "rank"))
        shape = struct.unpack(f"<{rank}I", need(4 * rank, "shape"))
        count = int(np.prod(shape)) if rank else 1
        payload = need(8 * count, f"payload of '{name}'")
        arr = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
        if name in arrays:
            raise CheckpointError(f"duplicate parameter '{name}'", pos)
        arrays[name] = arr
    return arrays


# ---------------------------------------------------------------------------
# initialization and gradient checking

def init_linear(rng, fan_in, fan_out):
    """Weight uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)], zero bias."""
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    return w, np.zeros(fan_out)


def finite_difference_check(f, tensors, step=1e-5, max_coords=None, seed=0):
    """Max relative error between analytic and central-difference gradients.

    f is a deterministic zero-argument callable returning a scalar Tensor,
    closed over `tensors` (an iterable of Tensors, or a ModelParams).
    Error per coordinate is |analytic - fd| / max(1, |analytic|); when
    max_coords is set, that many coordinates per tensor are sampled.
    """
    if isinstance(tensors, ModelParams):
        tensors = tensors.tensors()
    tensors = list(tensors)

    with Graph() as g:
        out = f()
    backward(g, out)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, a in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        n = flat.size
        if max_coords is not None and n > max_coords:
            coords = rng.choice(n, size=max_coords, replace=False)
        else:
            coords = np.arange(n)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            fp = f().item()
            flat[i] = orig - step
            fm = f().item()
            flat[i] = orig
            fd = (fp - fm) / (2.0 * step)
            ai = a.reshape(-1)[i]
            err = abs(ai - fd) / max(1.0, abs(ai))
            if err > worst:
                worst = err
    return worst
