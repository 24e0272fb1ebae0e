"""A small reverse-mode differentiation engine over dense float64 arrays.

Operations executed inside an active :class:`Tape` are recorded in order;
``tape.backward(loss)`` walks the records in reverse and accumulates
gradients into every leaf tensor created with ``requires_grad=True``.
Outside a tape, operations simply compute values.

    >>> x = Tensor([3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (x * x).sum()
    >>> tape.backward(loss)
    >>> x.grad
    array([6.])
"""
from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

_local = threading.local()


class NumericError(FloatingPointError):
    """Raised when an operation produces NaN or infinite values."""


class ShapeError(ValueError):
    pass


def active_tape() -> "Tape | None":
    return getattr(_local, "tape", None)


class Tape:
    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._outer = None

    def __enter__(self) -> "Tape":
        self._outer = active_tape()
        _local.tape = self
        return self

    def __exit__(self, *exc):
        _local.tape = self._outer
        return False

    def __len__(self):
        return len(self.records)

    def backward(self, loss: "Tensor") -> None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            return
        grads = {id(loss): np.ones_like(loss.data)}
        for out, inputs, fn in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._recorded:
                    k = id(inp)
                    grads[k] = grads[k] + gi if k in grads else gi
                else:
                    if inp.grad is None:
                        inp.grad = np.zeros_like(inp.data)
                    inp.grad += gi


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_recorded", "_tape")
    __array_ufunc__ = None  # make ndarray (op) Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name
        self._recorded = False
        self._tape = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericError(f"{op} produced non-finite values")
    tape = active_tape()
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._tape = None
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    out._recorded = needs
    if needs:
        out._tape = tape
        tape.records.append((out, inputs, backward))
    return out


def backward(loss: Tensor) -> None:
    """Backpropagate through the tape that recorded ``loss``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is not None:
        loss._tape.backward(loss)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise arithmetic ----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                   "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    return _result(ad / bd, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape),
                              _unbroadcast(-g * ad / (bd * bd), bd.shape)), "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x)
    return _result(y, (a,), lambda g: (g / x,), "log")


def tabs(a) -> Tensor:
    """Absolute value; the subgradient at 0 is taken as 0."""
    a = as_tensor(a)
    s = np.sign(a.data)
    return _result(np.abs(a.data), (a,), lambda g: (g * s,), "abs")


# -- linear algebra and indexing ---------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad @ bd, (a, b),
                   lambda g: (g @ bd.T if a.requires_grad else None,
                              ad.T @ g if b.requires_grad else None), "matmul")


def spmm(m: sp.spmatrix, x) -> Tensor:
    """Product of a constant sparse matrix with a dense tensor."""
    x = as_tensor(x)
    if m.shape[1] != x.shape[0]:
        raise ShapeError(f"spmm: incompatible shapes {m.shape} and {x.shape}")
    return _result(np.asarray(m @ x.data), (x,), lambda g: (np.asarray(m.T @ g),), "spmm")


def row_gather(m, idx) -> Tensor:
    m = as_tensor(m)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= m.shape[0]):
        raise IndexError(f"row_gather: index out of range for {m.shape[0]} rows")
    shape = m.shape

    def bw(g):
        gm = np.zeros(shape)
        np.add.at(gm, idx, g)
        return (gm,)

    return _result(m.data[idx], (m,), bw, "row_gather")


def pick(m, rows, cols) -> Tensor:
    """Elements ``m[rows[i], cols[i]]`` as a 1-D tensor."""
    m = as_tensor(m)
    rows, cols = np.asarray(rows), np.asarray(cols)
    shape = m.shape

    def bw(g):
        gm = np.zeros(shape)
        np.add.at(gm, (rows, cols), g)
        return (gm,)

    return _result(m.data[rows, cols], (m,), bw, "pick")


def concat_cols(*ts) -> Tensor:
    ts = tuple(as_tensor(t) for t in ts)
    if len({t.shape[0] for t in ts}) != 1:
        raise ShapeError("concat_cols: row counts differ")
    bounds = np.cumsum([0] + [t.shape[1] for t in ts])

    def bw(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(ts)))

    return _result(np.concatenate([t.data for t in ts], axis=1), ts, bw, "concat_cols")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis, keepdims), 1.0 / n)


# -- activations ---------------------------------------------------------------

def relu(a) -> Tensor:
    a = as_tensor(a)
    m = a.data > 0
    return _result(np.where(m, a.data, 0.0), (a,), lambda g: (g * m,), "relu")


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = as_tensor(a)
    d = np.where(a.data > 0, 1.0, slope)
    return _result(a.data * d, (a,), lambda g: (g * d,), "leaky_relu")


def elu(a, alpha: float = 1.0) -> Tensor:
    a = as_tensor(a)
    x = a.data
    neg_part = alpha * np.expm1(np.minimum(x, 0.0))
    y = np.where(x > 0, x, neg_part)
    d = np.where(x > 0, 1.0, neg_part + alpha)
    return _result(y, (a,), lambda g: (g * d,), "elu")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _result(np.logaddexp(0.0, x), (a,), lambda g: (g * sigmoid_np(x),), "softplus")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
    y = 0.5 * x * (1.0 + t)
    d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return _result(y, (a,), lambda g: (g * d,), "gelu")


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": relu,
    "leaky_relu": leaky_relu,
    "elu": elu,
    "tanh": tanh,
    "softplus": softplus,
    "gelu": gelu,
}


def softmax_rows(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    return _result(y, (a,), lambda g: (y * (g - (g * y).sum(axis=1, keepdims=True)),),
                   "softmax_rows")


def log_softmax_rows(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    y = z - lse
    return _result(y, (a,), lambda g: (g - np.exp(y) * g.sum(axis=1, keepdims=True),),
                   "log_softmax_rows")


# -- segment reductions ----------------------------------------------------------

def segment_matrix(ids: np.ndarray, n_segments: int, weights: np.ndarray | None = None
                   ) -> sp.csr_matrix:
    ids = np.asarray(ids, dtype=np.int64)
    w = np.ones(ids.shape[0]) if weights is None else weights
    return sp.csr_matrix((w, (ids, np.arange(ids.shape[0]))), shape=(n_segments, ids.shape[0]))


def segment_reduce(values, ids, n_segments: int, mode: str = "sum") -> Tensor:
    """Reduce rows of ``values`` that share a segment id.

    Empty segments yield zeros for every mode. For ``max``, the gradient goes
    to the lowest row index attaining the maximum.
    """
    values = as_tensor(values)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape[0] != values.shape[0]:
        raise ShapeError("segment_reduce: ids and values disagree on row count")
    if ids.size and (ids.min() < 0 or ids.max() >= n_segments):
        raise IndexError("segment_reduce: segment id out of range")
    if mode == "sum":
        return spmm(segment_matrix(ids, n_segments), values)
    if mode == "mean":
        counts = np.bincount(ids, minlength=n_segments).astype(float)
        w = 1.0 / np.maximum(counts, 1.0)[ids]
        return spmm(segment_matrix(ids, n_segments, w), values)
    if mode != "max":
        raise ValueError(f"unknown segment reduction {mode!r}")

    x = values.data
    n, d = x.shape
    out = np.zeros((n_segments, d))
    if n == 0:
        return _result(out, (values,), lambda g: (np.zeros_like(x),), "segment_max")
    order = np.argsort(ids, kind="stable")
    sid = ids[order]
    starts = np.flatnonzero(np.r_[True, sid[1:] != sid[:-1]])
    segs = sid[starts]
    xs = x[order]
    mx = np.maximum.reduceat(xs, starts, axis=0)
    out[segs] = mx
    hit = xs == np.repeat(mx, np.diff(np.r_[starts, n]), axis=0)
    cand = np.where(hit, order[:, None], n)
    arg = np.minimum.reduceat(cand, starts, axis=0)
    cols = np.broadcast_to(np.arange(d), arg.shape)

    def bw(g):
        gx = np.zeros_like(x)
        gx[arg, cols] = g[segs]
        return (gx,)

    return _result(out, (values,), bw, "segment_max")


# -- normalisation -----------------------------------------------------------------

def batch_norm_train(x, gamma, beta, eps: float):
    """Normalise columns with batch statistics.

    Returns ``(output, batch_mean, batch_var)``; the variance is the biased
    estimate used for normalisation.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd = x.data
    n = xd.shape[0]
    mu = xd.mean(axis=0)
    var = xd.var(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    gd = gamma.data

    def bw(g):
        dxhat = g * gd
        dx = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    out = _result(xhat * gd + beta.data, (x, gamma, beta), bw, "batch_norm")
    return out, mu, var
