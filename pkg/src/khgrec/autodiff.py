"""Minimal reverse-mode automatic differentiation over numpy float64 arrays.

Values are wrapped in :class:`Tensor`. Operations executed while a :class:`Tape`
is active (``with Tape() as tape:``) are recorded in execution order, and
``tape.gradient(loss, params)`` replays their vector-Jacobian products in
reverse. Outside a tape every primitive is a plain numpy computation.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

LEAKY_SLOPE = 0.2


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible operand extents."""

    def __init__(self, primitive, *shapes):
        self.primitive = primitive
        self.shapes = shapes
        extents = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{primitive}: incompatible shapes {extents}")


class Tensor:
    __slots__ = ("value", "requires_grad", "name")

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def numpy(self):
        return self.value

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def parameter(value, name=None):
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class _Record:
    __slots__ = ("primitive", "output", "inputs", "vjp")

    def __init__(self, primitive, output, inputs, vjp):
        self.primitive = primitive
        self.output = output
        self.inputs = inputs
        self.vjp = vjp


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of primitive applications.

    Tapes nest; only the innermost active tape records.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def gradient(self, loss, params):
        """Adjoints of a scalar ``loss`` with respect to each tensor in ``params``.

        Unused parameters receive zero arrays. The tape is not consumed, so
        calling this twice gives identical results.
        """
        if loss.value.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        adjoints = {id(loss): np.ones_like(loss.value)}
        for rec in reversed(self.records):
            g = adjoints.pop(id(rec.output), None)
            if g is None:
                continue
            grads = rec.vjp(g)
            for inp, gi in zip(rec.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in adjoints:
                    adjoints[key] = adjoints[key] + gi
                else:
                    adjoints[key] = gi
        return [
            adjoints.get(id(p), np.zeros_like(p.value)).reshape(p.shape) for p in params
        ]


def backward(tape, loss, params):
    return tape.gradient(loss, params)


def _emit(primitive, value, inputs, vjp):
    if not np.all(np.isfinite(value)):
        raise FloatingPointError(f"{primitive}: produced non-finite values")
    tracked = any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=tracked and bool(_ACTIVE))
    if out.requires_grad:
        _ACTIVE[-1].records.append(_Record(primitive, out, inputs, vjp))
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(primitive, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(primitive, a.shape, b.shape) from None


# elementwise binary


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _emit(
        "add",
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _emit(
        "sub",
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _emit(
        "mul",
        a.value * b.value,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.value / b.value
    return _emit(
        "div",
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.value, a.shape),
            _unbroadcast(-g * out / b.value, b.shape),
        ),
    )


def neg(a):
    return _emit("neg", -a.value, (a,), lambda g: (-g,))


# elementwise unary


def tanh(a):
    out = np.tanh(a.value)
    return _emit("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    out = _stable_sigmoid(a.value)
    return _emit("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def _stable_sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def log_sigmoid(a):
    """log(sigmoid(x)) without overflow for large |x|."""
    out = -np.logaddexp(0.0, -a.value)
    return _emit(
        "log_sigmoid", out, (a,), lambda g: (g * _stable_sigmoid(-a.value),)
    )


def leaky_relu(a, slope=LEAKY_SLOPE):
    mask = a.value > 0
    out = np.where(mask, a.value, slope * a.value)
    return _emit(
        "leaky_relu", out, (a,), lambda g: (np.where(mask, g, slope * g),)
    )


def exp(a):
    out = np.exp(a.value)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a):
    return _emit("log", np.log(a.value), (a,), lambda g: (g / a.value,))


def square(a):
    return _emit("square", a.value * a.value, (a,), lambda g: (2.0 * g * a.value,))


def safe_pow(a, p):
    """``a**p`` on strictly positive entries, 0 elsewhere (pseudo-inverse convention)."""
    pos = a.value > 0
    base = np.where(pos, a.value, 1.0)
    out = np.where(pos, base**p, 0.0)
    return _emit(
        "safe_pow",
        out,
        (a,),
        lambda g: (np.where(pos, g * p * base ** (p - 1.0), 0.0),),
    )


# linear algebra and shape


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _emit(
        "matmul",
        a.value @ b.value,
        (a, b),
        lambda g: (g @ b.value.T, a.value.T @ g),
    )


def transpose(a):
    if a.ndim != 2:
        raise ShapeError("transpose", a.shape)
    return _emit("transpose", a.value.T, (a,), lambda g: (g.T,))


def reshape(a, shape):
    return _emit("reshape", a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in tensors)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit(
        "concat", out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis))
    )


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    out = np.sum(a.value, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit("sum", out, (a,), vjp)


def mean(a, axis=None, keepdims=False):
    n = a.value.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def l2_norm_sq(a):
    return _emit("l2_norm_sq", np.sum(a.value * a.value), (a,), lambda g: (2.0 * g * a.value,))


def softmax(a):
    """Softmax over the last axis."""
    z = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)
    return _emit(
        "softmax",
        out,
        (a,),
        lambda g: (out * (g - np.sum(g * out, axis=-1, keepdims=True)),),
    )


def log_softmax(a):
    z = a.value - a.value.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    p = np.exp(out)
    return _emit(
        "log_softmax",
        out,
        (a,),
        lambda g: (g - p * np.sum(g, axis=-1, keepdims=True),),
    )


def masked_softmax(a, mask):
    """Row softmax restricted to ``mask`` (bool, same shape); masked entries are 0.

    Every row must keep at least one entry.
    """
    if mask.shape != a.shape:
        raise ShapeError("masked_softmax", a.shape, mask.shape)
    z = np.where(mask, a.value, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    out = e / e.sum(axis=-1, keepdims=True)
    return _emit(
        "masked_softmax",
        out,
        (a,),
        lambda g: (out * (g - np.sum(g * out, axis=-1, keepdims=True)),),
    )


def layer_norm(a, eps=1e-5):
    """Parameter-free layer normalisation over the last axis."""
    mu = a.value.mean(axis=-1, keepdims=True)
    xc = a.value - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    n = a.shape[-1]

    def vjp(g):
        gs = g.sum(axis=-1, keepdims=True)
        gx = (g * xhat).sum(axis=-1, keepdims=True)
        return (inv * (g - gs / n - xhat * gx / n),)

    return _emit("layer_norm", xhat, (a,), vjp)


def row_normalize(a):
    """Unit-normalise rows; zero rows map to zero rows with zero gradient."""
    norm = np.sqrt(np.sum(a.value * a.value, axis=-1, keepdims=True))
    safe = np.where(norm > 0, norm, 1.0)
    out = np.where(norm > 0, a.value / safe, 0.0)

    def vjp(g):
        proj = np.sum(g * out, axis=-1, keepdims=True)
        return (np.where(norm > 0, (g - out * proj) / safe, 0.0),)

    return _emit("row_normalize", out, (a,), vjp)


# indexing and segment ops


def gather(a, index):
    """Rows ``a[index]`` along axis 0."""
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= a.shape[0]):
        raise IndexError(f"gather: index out of range for {a.shape[0]} rows")

    def vjp(g):
        out = np.zeros_like(a.value)
        np.add.at(out, index, g)
        return (out,)

    return _emit("gather", a.value[index], (a,), vjp)


def scatter_add(a, index, n):
    """``out[index[j]] += a[j]`` into ``n`` rows."""
    index = np.asarray(index, dtype=np.int64)
    if index.shape[0] != a.shape[0]:
        raise ShapeError("scatter_add", a.shape, index.shape)
    out = np.zeros((n,) + a.shape[1:])
    np.add.at(out, index, a.value)
    return _emit("scatter_add", out, (a,), lambda g: (g[index],))


def segment_softmax(scores, segments, n_segments):
    """Softmax of a 1-D score vector within each segment id group."""
    segments = np.asarray(segments, dtype=np.int64)
    if scores.ndim != 1 or scores.shape[0] != segments.shape[0]:
        raise ShapeError("segment_softmax", scores.shape, segments.shape)
    peak = np.full(n_segments, -np.inf)
    np.maximum.at(peak, segments, scores.value)
    e = np.exp(scores.value - peak[segments])
    total = np.zeros(n_segments)
    np.add.at(total, segments, e)
    out = e / total[segments]

    def vjp(g):
        dot = np.zeros(n_segments)
        np.add.at(dot, segments, g * out)
        return (out * (g - dot[segments]),)

    return _emit("segment_softmax", out, (scores,), vjp)


def sparse_matmul(S, x):
    """Constant sparse matrix (scipy) times dense tensor."""
    if S.shape[1] != x.shape[0]:
        raise ShapeError("sparse_matmul", S.shape, x.shape)
    S = sp.csr_matrix(S)
    St = S.T.tocsr()
    return _emit("sparse_matmul", np.asarray(S @ x.value), (x,), lambda g: (np.asarray(St @ g),))


def spmm(values, rows, cols, n_rows, x):
    """Sparse matrix with differentiable nonzero ``values`` at (rows, cols) times ``x``.

    Duplicate (row, col) coordinates add up.
    """
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if values.ndim != 1 or values.shape[0] != rows.shape[0] or x.ndim != 2:
        raise ShapeError("spmm", values.shape, rows.shape, x.shape)
    if cols.size and cols.max() >= x.shape[0]:
        raise ShapeError("spmm", (n_rows, int(cols.max()) + 1), x.shape)
    S = sp.csr_matrix((values.value, (rows, cols)), shape=(n_rows, x.shape[0]))
    out = np.asarray(S @ x.value)

    def vjp(g):
        gv = np.einsum("ij,ij->i", g[rows], x.value[cols]) if values.requires_grad else None
        gx = np.asarray(S.T @ g) if x.requires_grad else None
        return (gv, gx)

    return _emit("spmm", out, (values, x), vjp)
