"""Small fixtures shared across test modules."""
from __future__ import annotations

from eventgraph.models import ARCHS, CONV_KINDS, BatchNormSpec, HyperParams, LayerSpec
from eventgraph.optim import OptimizerSpec

ALL_MODELS = [(a, c) for a in ARCHS for c in CONV_KINDS]


def small_hp(arch: str, conv_kind: str, *, units: int = 8, aggr: str = "add",
             batch_norm: bool = False, dropout: float | None = None, skip: bool = True,
             activation: str = "tanh", pooling: str = "mean",
             optimizer: OptimizerSpec | None = None, batch_size: int = 32,
             loss: str = "cross_entropy") -> HyperParams:
    bn = BatchNormSpec() if batch_norm else None
    ag = aggr if conv_kind == "graphconv" else None

    def conv(n, first_skip=False):
        return [LayerSpec(units, activation, skip and (i > 0 or first_skip), dropout, bn, ag)
                for i in range(n)]

    def dense(n, width=units):
        return [LayerSpec(width, activation, False, dropout, bn) for _ in range(n)]

    return HyperParams(
        arch=arch, conv_kind=conv_kind,
        node_layers=conv(2), head_layers=dense(1),
        graph_layers=dense(1, 4) if arch != "O" else [],
        pseudo_layers=conv(1) if arch == "TP" else [],
        embed_layers=conv(1) if arch == "TE" else [],
        concat_layers=conv(1, first_skip=True) if arch in ("TP", "TE") else [],
        embedding_dim=4 if arch == "TE" else None,
        pooling=pooling, optimizer=optimizer or OptimizerSpec("adam", 1e-2),
        batch_size=batch_size, loss=loss,
    )
