"""Graph convolutions, dense blocks, pooling and losses on top of :mod:`autodiff`."""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tensor


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _check_edges(edge_index: np.ndarray, n: int) -> None:
    if edge_index.size and (edge_index.min() < 0 or edge_index.max() >= n):
        raise IndexError(f"edge index out of range for {n} nodes")


def gcn_matrix(edge_index: np.ndarray, edge_weights: np.ndarray, n: int) -> sp.csr_matrix:
    """Renormalised propagation matrix with unit self-loops.

    Row ``t``, column ``s`` holds ``w / sqrt(deg(s) deg(t))`` for an edge
    ``s -> t``; the diagonal holds ``1 / deg(v)``, where ``deg(v)`` is one
    plus the summed weight of edges entering ``v``.
    """
    _check_edges(edge_index, n)
    src, dst = edge_index[0], edge_index[1]
    w = np.asarray(edge_weights, dtype=float)
    deg = 1.0 + np.bincount(dst, weights=w, minlength=n)
    coef = w / np.sqrt(deg[src] * deg[dst])
    loops = np.arange(n)
    rows = np.concatenate([dst, loops])
    cols = np.concatenate([src, loops])
    vals = np.concatenate([coef, 1.0 / deg])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def neighbor_matrix(edge_index: np.ndarray, edge_weights: np.ndarray, n: int,
                    aggr: str = "add") -> sp.csr_matrix:
    """Weighted in-neighbour aggregation matrix (``add`` or ``mean``)."""
    _check_edges(edge_index, n)
    src, dst = edge_index[0], edge_index[1]
    w = np.asarray(edge_weights, dtype=float)
    if aggr == "mean":
        count = np.bincount(dst, minlength=n).astype(float)
        w = w / np.maximum(count, 1.0)[dst]
    elif aggr != "add":
        raise ValueError(f"no matrix form for aggregation {aggr!r}")
    return sp.csr_matrix((w, (dst, src)), shape=(n, n))


def _cached(cache: dict | None, key, make):
    if cache is None:
        return make()
    if key not in cache:
        cache[key] = make()
    return cache[key]


class Layer:
    """Plain parameter container; ``params`` maps names to trainable tensors."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def _param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self.params[name] = t
        return t


class GcnConv(Layer):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.weight = self._param("weight", glorot(rng, d_in, d_out))
        self.bias = self._param("bias", np.zeros(d_out))

    def __call__(self, x, edge_index, edge_weights, cache=None) -> Tensor:
        x = ad.as_tensor(x)
        n = x.shape[0]
        a = _cached(cache, ("gcn", n), lambda: gcn_matrix(edge_index, edge_weights, n))
        return ad.spmm(a, x @ self.weight) + self.bias


class GraphConv(Layer):
    """Self transform plus weighted neighbour aggregation (add/mean/max)."""

    def __init__(self, d_in: int, d_out: int, aggr: str, rng: np.random.Generator):
        super().__init__()
        if aggr not in ("add", "mean", "max"):
            raise ValueError(f"unknown aggregation {aggr!r}")
        self.d_in, self.d_out, self.aggr = d_in, d_out, aggr
        self.weight_self = self._param("weight_self", glorot(rng, d_in, d_out))
        self.weight_neigh = self._param("weight_neigh", glorot(rng, d_in, d_out))
        self.bias = self._param("bias", np.zeros(d_out))

    def aggregate(self, x: Tensor, edge_index, edge_weights, cache=None) -> Tensor:
        n = x.shape[0]
        if self.aggr == "max":
            _check_edges(edge_index, n)
            w = np.asarray(edge_weights, dtype=float)[:, None]
            msgs = ad.row_gather(x, edge_index[0]) * w
            return ad.segment_reduce(msgs, edge_index[1], n, "max")
        m = _cached(cache, ("neigh", self.aggr, n),
                    lambda: neighbor_matrix(edge_index, edge_weights, n, self.aggr))
        return ad.spmm(m, x)

    def __call__(self, x, edge_index, edge_weights, cache=None) -> Tensor:
        x = ad.as_tensor(x)
        agg = self.aggregate(x, edge_index, edge_weights, cache)
        return x @ self.weight_self + agg @ self.weight_neigh + self.bias


class Dense(Layer):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.weight = self._param("weight", glorot(rng, d_in, d_out))
        self.bias = self._param("bias", np.zeros(d_out))

    def __call__(self, x) -> Tensor:
        return ad.as_tensor(x) @ self.weight + self.bias


class Projection(Layer):
    """Bias-free linear map used by skip connections across width changes."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        super().__init__()
        self.weight = self._param("weight", glorot(rng, d_in, d_out))

    def __call__(self, x) -> Tensor:
        return ad.as_tensor(x) @ self.weight


class BatchNorm(Layer):
    def __init__(self, d: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.gamma = self._param("gamma", np.ones(d))
        self.beta = self._param("beta", np.zeros(d))
        self.running_mean = np.zeros(d)
        self.running_var = np.ones(d)

    def __call__(self, x, training: bool) -> Tensor:
        x = ad.as_tensor(x)
        if training:
            out, mu, var = ad.batch_norm_train(x, self.gamma, self.beta, self.eps)
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mu
            self.running_var = (1 - m) * self.running_var + m * var
            return out
        inv = 1.0 / np.sqrt(self.running_var + self.eps)
        return (x - self.running_mean) * (self.gamma * inv) + self.beta

    def buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}


class Embedding(Layer):
    def __init__(self, vocab_size: int, dim: int, rng: np.random.Generator):
        super().__init__()
        self.table = self._param("table", rng.normal(0.0, 1.0, size=(vocab_size, dim)))

    def __call__(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.table.shape[0]):
            raise IndexError("embedding id out of vocabulary")
        return ad.row_gather(self.table, ids)


def gcn_conv(x, edge_index, edge_weights, layer: GcnConv) -> Tensor:
    return layer(x, np.asarray(edge_index), np.asarray(edge_weights))


def graph_conv(x, edge_index, edge_weights, layer: GraphConv) -> Tensor:
    return layer(x, np.asarray(edge_index), np.asarray(edge_weights))


def dense(x, w, b) -> Tensor:
    return ad.as_tensor(x) @ w + b


def dropout(x, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity outside training or at rate 0."""
    x = ad.as_tensor(x)
    if not training or not rate:
        return x
    keep = rng.random(x.shape) >= rate
    return x * (keep / (1.0 - rate))


def embedding(ids, table) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    table = ad.as_tensor(table)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError("embedding id out of vocabulary")
    return ad.row_gather(table, ids)


POOLING = {"mean": "mean", "add": "sum", "max": "max"}


def pool(x, graph_id, n_graphs: int, method: str = "mean") -> Tensor:
    counts = np.bincount(np.asarray(graph_id), minlength=n_graphs)
    if (counts == 0).any():
        raise ValueError("pooling over a graph with no nodes")
    if method not in POOLING:
        raise ValueError(f"unknown pooling {method!r}")
    return ad.segment_reduce(x, graph_id, n_graphs, POOLING[method])


def cross_entropy(logits, labels) -> Tensor:
    logits = ad.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    lp = ad.log_softmax_rows(logits)
    return ad.scale(ad.pick(lp, np.arange(len(labels)), labels).sum(), -1.0 / len(labels))


def multi_margin(logits, labels, margin: float = 1.0) -> Tensor:
    """Mean over samples of ``sum_{i != y} max(0, margin - x_y + x_i) / C``."""
    logits = ad.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    xy = ad.reshape(ad.pick(logits, np.arange(b), labels), (b, 1))
    hinge = ad.relu(logits - xy + margin)
    off = np.ones((b, c))
    off[np.arange(b), labels] = 0.0
    return ad.scale((hinge * off).sum(), 1.0 / (b * c))


LOSSES = {"cross_entropy": cross_entropy, "multi_margin": multi_margin}
