"""Fixed configurations used by the experiment scripts and the acceptance suite.

``band_hp`` is a hand-picked configuration for the balanced synthetic log:
two 32-unit convolutions, one 32-unit head layer, Adam at 1e-2 with a little
weight decay. ``desk_space`` and ``desk_train`` shrink the tuning search so a
25-trial run on the 2000-trace imbalanced log fits in a couple of minutes on
one core.
"""
from __future__ import annotations

from .models import HyperParams, LayerSpec
from .optim import OptimizerSpec
from .trainer import TrainConfig
from .tuner import SearchSpace, TuneConfig


def band_hp(arch: str, conv_kind: str) -> HyperParams:
    aggr = "add" if conv_kind == "graphconv" else None
    conv = lambda units: LayerSpec(units, aggr=aggr)  # noqa: E731
    return HyperParams(
        arch=arch, conv_kind=conv_kind,
        node_layers=[conv(32), conv(32)],
        head_layers=[LayerSpec(32)],
        graph_layers=[LayerSpec(16)] if arch != "O" else [],
        pseudo_layers=[conv(16)] if arch == "TP" else [],
        embed_layers=[conv(16)] if arch == "TE" else [],
        concat_layers=[conv(32)] if arch in ("TP", "TE") else [],
        embedding_dim=10 if arch == "TE" else None,
        optimizer=OptimizerSpec("adam", 1e-2, weight_decay=1e-3),
        batch_size=128,
    )


def desk_space() -> SearchSpace:
    return SearchSpace(conv_layers=(1, 3), dense_layers=(1, 2), units=(16, 64),
                       batch_sizes=(64, 128, 512))


def desk_train() -> TrainConfig:
    return TrainConfig(max_epochs=15, patience=6)


def desk_tune(budget: int = 25) -> TuneConfig:
    return TuneConfig(budget=budget, train=desk_train(), space=desk_space())
