"""Split, fit encoders on the training side, and turn traces into graphs."""
from __future__ import annotations

from dataclasses import dataclass

from .encode import EncoderState, fit
from .eventlog import Dataset
from .graphrep import GraphInstance, WeightScaler, build_graph, fit_weight_scaler
from .models import InputDims
from .pseudoembed import BinningConfig, PseudoProvider
from .trainer import split_stratified
from .tuner import TuneData, classify_dataset


@dataclass
class Prepared:
    dataset: Dataset
    train: Dataset
    val: Dataset
    state: EncoderState
    scaler: WeightScaler
    provider: PseudoProvider | None
    train_graphs: list[GraphInstance]
    val_graphs: list[GraphInstance]

    @property
    def dims(self) -> InputDims:
        return input_dims(self.state, self.provider)

    def tune_data(self, kind: str | None = None, threshold: float = 1.5) -> TuneData:
        kind = kind or classify_dataset(self.dataset.class_counts(), threshold)
        return TuneData(self.train_graphs, self.val_graphs, self.dims,
                        list(self.dataset.class_names), kind)


def input_dims(state: EncoderState, provider: PseudoProvider | None) -> InputDims:
    return InputDims(state.node_dim, state.graph_dim,
                     None if provider is None else provider.dim,
                     1 + len(state.activities), state.activity_width)


def featurize(traces, state: EncoderState, scaler: WeightScaler,
              provider: PseudoProvider | None) -> list[GraphInstance]:
    return [build_graph(t, state, scaler, provider) for t in traces]


def prepare(dataset: Dataset, split_fraction: float = 0.8, seed: int = 0,
            binning: BinningConfig | None = None) -> Prepared:
    """Everything fitted on the training split only; pseudo-embeddings need durations."""
    train, val = split_stratified(dataset, split_fraction, seed)
    state = fit(train.traces, dataset.schema)
    scaler = fit_weight_scaler(train.traces)
    provider = None
    if train.has_durations():
        provider = PseudoProvider.fit(train.traces, binning or BinningConfig())
    return Prepared(dataset, train, val, state, scaler, provider,
                    featurize(train.traces, state, scaler, provider),
                    featurize(val.traces, state, scaler, provider))
