"""Chain graphs built from encoded traces, and disjoint-union batching."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .encode import EncoderState, encode_graph_attrs, encode_node
from .eventlog import CaseTrace


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class GraphInstance:
    node_feats: np.ndarray  # n x d_N, -1 where masked
    node_mask: np.ndarray  # n x d_N bool
    edge_index: np.ndarray  # 2 x (n-1)
    edge_weights: np.ndarray  # n-1, scaled to [0, 1]
    graph_vec: np.ndarray  # d_G
    label: int
    activity_ids: np.ndarray  # n
    pseudo_feats: np.ndarray | None = None  # n x d_P

    @property
    def num_nodes(self) -> int:
        return self.node_feats.shape[0]


def chain_edges(n: int) -> np.ndarray:
    src = np.arange(max(n - 1, 0), dtype=np.int64)
    return np.stack([src, src + 1])


def raw_edge_weights(trace: CaseTrace) -> np.ndarray:
    starts = np.array([e.start_ts for e in trace.events], dtype=float)
    w = np.diff(starts)
    if (w < 0).any():
        raise GraphError(f"case {trace.case_id}: events are not sorted by start time")
    return w


@dataclass(frozen=True)
class WeightScaler:
    lo: float
    hi: float

    def __call__(self, raw: np.ndarray) -> np.ndarray:
        raw = np.asarray(raw, dtype=float)
        if self.hi == self.lo:
            return np.zeros_like(raw)
        return np.clip((raw - self.lo) / (self.hi - self.lo), 0.0, 1.0)


def fit_weight_scaler(train: Sequence[CaseTrace]) -> WeightScaler:
    ws = [raw_edge_weights(t) for t in train]
    allw = np.concatenate(ws) if ws else np.zeros(0)
    if allw.size == 0:
        return WeightScaler(0.0, 0.0)
    return WeightScaler(float(allw.min()), float(allw.max()))


def scale_weights(raw: np.ndarray, scaler: WeightScaler) -> np.ndarray:
    return scaler(raw)


def build_graph(trace: CaseTrace, state: EncoderState, scaler: WeightScaler,
                pseudo_provider: Callable[[CaseTrace], np.ndarray] | None = None
                ) -> GraphInstance:
    nodes = [encode_node(e, state) for e in trace.events]
    n = len(nodes)
    pseudo = None
    if pseudo_provider is not None:
        pseudo = np.asarray(pseudo_provider(trace), dtype=float)
        if pseudo.shape[0] != n:
            raise GraphError("pseudo-embedding rows do not match node count")
    return GraphInstance(
        node_feats=np.stack([x.vector for x in nodes]),
        node_mask=np.stack([x.mask for x in nodes]),
        edge_index=chain_edges(n),
        edge_weights=scaler(raw_edge_weights(trace)),
        graph_vec=encode_graph_attrs(trace, state),
        label=int(trace.label),
        activity_ids=np.array([state.activity_id(e.activity) for e in trace.events],
                              dtype=np.int64),
        pseudo_feats=pseudo,
    )


@dataclass
class Batch:
    node_feats: np.ndarray
    node_mask: np.ndarray
    edge_index: np.ndarray
    edge_weights: np.ndarray
    graph_id: np.ndarray
    graph_vecs: np.ndarray
    labels: np.ndarray
    activity_ids: np.ndarray
    pseudo_feats: np.ndarray | None
    sizes: np.ndarray
    # propagation matrices are memoised here by the layers
    cache: dict = field(default_factory=dict, repr=False)

    @property
    def num_nodes(self) -> int:
        return self.node_feats.shape[0]

    @property
    def num_graphs(self) -> int:
        return self.labels.shape[0]

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.sizes)[:-1]]).astype(np.int64)


def make_batch(graphs: Sequence[GraphInstance]) -> Batch:
    if len(graphs) == 0:
        raise GraphError("cannot batch an empty list of graphs")
    d = graphs[0].node_feats.shape[1]
    dg = graphs[0].graph_vec.shape[0]
    has_pseudo = graphs[0].pseudo_feats is not None
    dp = graphs[0].pseudo_feats.shape[1] if has_pseudo else None
    for g in graphs:
        if g.node_feats.shape[1] != d or g.graph_vec.shape[0] != dg:
            raise GraphError("graphs in a batch must share feature dimensions")
        if (g.pseudo_feats is not None) != has_pseudo or (
                has_pseudo and g.pseudo_feats.shape[1] != dp):
            raise GraphError("graphs in a batch must agree on pseudo-embedding dimension")
    sizes = np.array([g.num_nodes for g in graphs], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    edge_index = np.concatenate([g.edge_index + off for g, off in zip(graphs, offsets)], axis=1)
    return Batch(
        node_feats=np.concatenate([g.node_feats for g in graphs]),
        node_mask=np.concatenate([g.node_mask for g in graphs]),
        edge_index=edge_index.astype(np.int64),
        edge_weights=np.concatenate([g.edge_weights for g in graphs]),
        graph_id=np.repeat(np.arange(len(graphs), dtype=np.int64), sizes),
        graph_vecs=np.stack([g.graph_vec for g in graphs]),
        labels=np.array([g.label for g in graphs], dtype=np.int64),
        activity_ids=np.concatenate([g.activity_ids for g in graphs]),
        pseudo_feats=np.concatenate([g.pseudo_feats for g in graphs]) if has_pseudo else None,
        sizes=sizes,
    )


def unbatch(batch: Batch) -> list[GraphInstance]:
    out = []
    eoff = 0
    for k, (off, n) in enumerate(zip(batch.offsets, batch.sizes)):
        ne = max(n - 1, 0)
        sl = slice(off, off + n)
        out.append(GraphInstance(
            node_feats=batch.node_feats[sl],
            node_mask=batch.node_mask[sl],
            edge_index=batch.edge_index[:, eoff:eoff + ne] - off,
            edge_weights=batch.edge_weights[eoff:eoff + ne],
            graph_vec=batch.graph_vecs[k],
            label=int(batch.labels[k]),
            activity_ids=batch.activity_ids[sl],
            pseudo_feats=None if batch.pseudo_feats is None else batch.pseudo_feats[sl],
        ))
        eoff += ne
    return out


def save_graphs(path, graphs: Sequence[GraphInstance]) -> None:
    """Write graphs as one batched ``.npz`` (no pickling)."""
    b = make_batch(graphs)
    arrays = dict(node_feats=b.node_feats, node_mask=b.node_mask, edge_index=b.edge_index,
                  edge_weights=b.edge_weights, graph_vecs=b.graph_vecs, labels=b.labels,
                  activity_ids=b.activity_ids, sizes=b.sizes)
    if b.pseudo_feats is not None:
        arrays["pseudo_feats"] = b.pseudo_feats
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_graphs(path) -> list[GraphInstance]:
    with np.load(path, allow_pickle=False) as z:
        sizes = z["sizes"]
        b = Batch(z["node_feats"], z["node_mask"], z["edge_index"], z["edge_weights"],
                  np.repeat(np.arange(len(sizes)), sizes), z["graph_vecs"], z["labels"],
                  z["activity_ids"], z["pseudo_feats"] if "pseudo_feats" in z else None, sizes)
    return unbatch(b)
