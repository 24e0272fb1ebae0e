"""The four graph classifier architectures.

``O``  one-level: graph vector repeated onto every node before convolution.
``T``  two-level: node convolutions pooled, graph vector through dense layers,
       both concatenated.
``TP`` two-level plus a second convolution stack over duration-bin
       pseudo-embeddings, merged node-wise before a shared stack.
``TE`` two-level plus a learned activity embedding with its own stack.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graphrep import Batch
from .layers import (BatchNorm, Dense, Embedding, GcnConv, GraphConv, Projection,
                     dropout, pool)
from .optim import OptimizerSpec, SchedulerSpec

ARCHS = ("O", "T", "TP", "TE")
CONV_KINDS = ("gcnconv", "graphconv")


@dataclass
class BatchNormSpec:
    momentum: float = 0.1
    eps: float = 1e-5


@dataclass
class LayerSpec:
    units: int
    activation: str = "relu"
    skip: bool = False
    dropout: float | None = None
    batch_norm: BatchNormSpec | None = None
    aggr: str | None = None  # graphconv layers only

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        bn = d.get("batch_norm")
        return cls(d["units"], d.get("activation", "relu"), d.get("skip", False),
                   d.get("dropout"), BatchNormSpec(**bn) if bn else None, d.get("aggr"))


def _layers(raw) -> list[LayerSpec]:
    return [LayerSpec.from_dict(x) for x in raw or []]


@dataclass
class HyperParams:
    arch: str
    conv_kind: str
    node_layers: list[LayerSpec]
    head_layers: list[LayerSpec]
    graph_layers: list[LayerSpec] = field(default_factory=list)
    pseudo_layers: list[LayerSpec] = field(default_factory=list)
    embed_layers: list[LayerSpec] = field(default_factory=list)
    concat_layers: list[LayerSpec] = field(default_factory=list)
    pooling: str = "mean"
    embedding_dim: int | None = None
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    scheduler: SchedulerSpec | None = None
    loss: str = "cross_entropy"
    batch_size: int = 64
    l1: float = 0.0

    @property
    def model_name(self) -> str:
        return f"{self.arch}-{self.conv_kind}"

    def check_structure(self) -> None:
        """Stacks must be present exactly when the architecture uses them."""
        if self.arch not in ARCHS:
            raise ValueError(f"unknown architecture {self.arch!r}")
        if self.conv_kind not in CONV_KINDS:
            raise ValueError(f"unknown convolution {self.conv_kind!r}")
        need = {
            "graph_layers": self.arch != "O",
            "pseudo_layers": self.arch == "TP",
            "embed_layers": self.arch == "TE",
            "concat_layers": self.arch in ("TP", "TE"),
        }
        if not self.node_layers or not self.head_layers:
            raise ValueError("node and head stacks need at least one layer")
        for name, required in need.items():
            if bool(getattr(self, name)) != required:
                state = "needs" if required else "must not have"
                raise ValueError(f"{self.arch} architecture {state} {name}")
        if (self.embedding_dim is not None) != (self.arch == "TE"):
            raise ValueError("embedding_dim is set exactly for the TE architecture")
        for spec in self.conv_specs():
            if (spec.aggr is not None) != (self.conv_kind == "graphconv"):
                raise ValueError("aggr is set exactly on graphconv layers")

    def conv_specs(self) -> list[LayerSpec]:
        return self.node_layers + self.pseudo_layers + self.embed_layers + self.concat_layers

    def to_dict(self) -> dict:
        d = asdict(self)
        d["optimizer"] = self.optimizer.to_dict()
        d["scheduler"] = None if self.scheduler is None else self.scheduler.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HyperParams":
        return cls(
            arch=d["arch"], conv_kind=d["conv_kind"],
            node_layers=_layers(d["node_layers"]), head_layers=_layers(d["head_layers"]),
            graph_layers=_layers(d.get("graph_layers")),
            pseudo_layers=_layers(d.get("pseudo_layers")),
            embed_layers=_layers(d.get("embed_layers")),
            concat_layers=_layers(d.get("concat_layers")),
            pooling=d.get("pooling", "mean"), embedding_dim=d.get("embedding_dim"),
            optimizer=OptimizerSpec.from_dict(d["optimizer"]),
            scheduler=SchedulerSpec.from_dict(d.get("scheduler")),
            loss=d.get("loss", "cross_entropy"), batch_size=d.get("batch_size", 64),
            l1=d.get("l1", 0.0),
        )


@dataclass
class InputDims:
    node: int
    graph: int
    pseudo: int | None = None
    n_activities: int | None = None  # embedding rows, including the unseen slot
    activity_width: int = 0


def apply_input_mask(node_feats: np.ndarray, node_mask: np.ndarray) -> np.ndarray:
    """Zero the padded (-1) positions before the first layer."""
    return np.where(node_mask, node_feats, 0.0)


class Block:
    """conv-or-dense -> batch norm -> activation -> dropout, plus optional skip."""

    def __init__(self, spec: LayerSpec, d_in: int, conv_kind: str | None,
                 rng: np.random.Generator):
        self.spec = spec
        self.d_in, self.d_out = d_in, spec.units
        if conv_kind == "gcnconv":
            self.core = GcnConv(d_in, spec.units, rng)
        elif conv_kind == "graphconv":
            self.core = GraphConv(d_in, spec.units, spec.aggr or "add", rng)
        else:
            self.core = Dense(d_in, spec.units, rng)
        self.is_conv = conv_kind is not None
        self.bn = None
        if spec.batch_norm is not None:
            self.bn = BatchNorm(spec.units, spec.batch_norm.momentum, spec.batch_norm.eps)
        self.proj = None
        if spec.skip and d_in != spec.units:
            self.proj = Projection(d_in, spec.units, rng)
        self.act = ad.ACTIVATIONS[spec.activation]

    def parts(self):
        yield "core", self.core
        if self.bn is not None:
            yield "bn", self.bn
        if self.proj is not None:
            yield "proj", self.proj

    def __call__(self, x: Tensor, batch: Batch | None, training: bool, rng) -> Tensor:
        if self.is_conv:
            h = self.core(x, batch.edge_index, batch.edge_weights, batch.cache)
        else:
            h = self.core(x)
        if self.bn is not None:
            h = self.bn(h, training)
        h = self.act(h)
        if self.spec.dropout:
            h = dropout(h, self.spec.dropout, training, rng)
        if self.spec.skip:
            h = h + (x if self.proj is None else self.proj(x))
        return h


class Stack:
    def __init__(self, specs: list[LayerSpec], d_in: int, conv_kind: str | None,
                 rng: np.random.Generator):
        self.blocks = []
        for spec in specs:
            self.blocks.append(Block(spec, d_in, conv_kind, rng))
            d_in = spec.units
        self.d_out = d_in

    def __call__(self, x, batch, training, rng) -> Tensor:
        for b in self.blocks:
            x = b(x, batch, training, rng)
        return x


class Model:
    def __init__(self, hp: HyperParams, dims: InputDims, n_classes: int, seed: int = 0):
        hp.check_structure()
        if hp.arch == "TP" and not dims.pseudo:
            raise ValueError("TP architecture needs a pseudo-embedding dimension")
        if hp.arch == "TE" and not dims.n_activities:
            raise ValueError("TE architecture needs the activity vocabulary size")
        self.hp, self.dims, self.n_classes = hp, dims, n_classes
        rng = np.random.default_rng(seed)
        conv = hp.conv_kind
        self.stacks: dict[str, Stack] = {}
        self.embedding = None
        if hp.arch == "O":
            node_out = self._stack("node", hp.node_layers, dims.node + dims.graph, conv, rng)
            pooled = node_out
        else:
            if hp.arch == "TE":
                self.embedding = Embedding(dims.n_activities, hp.embedding_dim, rng)
                rest = dims.node - dims.activity_width
                merged = self._stack("embed", hp.embed_layers, hp.embedding_dim, conv, rng)
                if rest > 0:
                    merged += self._stack("node", hp.node_layers, rest, conv, rng)
            else:
                merged = self._stack("node", hp.node_layers, dims.node, conv, rng)
                if hp.arch == "TP":
                    merged += self._stack("pseudo", hp.pseudo_layers, dims.pseudo, conv, rng)
            if hp.arch in ("TP", "TE"):
                merged = self._stack("concat", hp.concat_layers, merged, conv, rng)
            pooled = merged
            if dims.graph > 0:
                pooled += self._stack("graph", hp.graph_layers, dims.graph, None, rng)
        head_out = self._stack("head", hp.head_layers, pooled, None, rng)
        self.classifier = Dense(head_out, n_classes, rng)

    def _stack(self, name, specs, d_in, conv, rng) -> int:
        s = Stack(specs, d_in, conv, rng)
        self.stacks[name] = s
        return s.d_out

    # -- parameters ---------------------------------------------------------------

    def _named_layers(self):
        if self.embedding is not None:
            yield "embedding", self.embedding
        for sname, stack in self.stacks.items():
            for i, block in enumerate(stack.blocks):
                for pname, layer in block.parts():
                    yield f"{sname}.{i}.{pname}", layer
        yield "classifier", self.classifier

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for prefix, layer in self._named_layers():
            for k, t in layer.params.items():
                out[f"{prefix}.{k}"] = t
        return out

    def weight_matrices(self) -> list[Tensor]:
        """Parameters subject to L1: everything except biases and batch-norm affine terms."""
        return [t for name, t in self.parameters().items()
                if not name.endswith((".bias", ".gamma", ".beta"))]

    def batch_norms(self) -> dict[str, BatchNorm]:
        return {p: l for p, l in self._named_layers() if isinstance(l, BatchNorm)}

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: t.data.copy() for k, t in self.parameters().items()}
        for prefix, bn in self.batch_norms().items():
            state[f"{prefix}.running_mean"] = bn.running_mean.copy()
            state[f"{prefix}.running_var"] = bn.running_var.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        for k, t in params.items():
            value = np.asarray(state[k], dtype=float)
            if value.shape != t.shape:
                raise ValueError(f"{k}: shape {value.shape} does not match {t.shape}")
            t.data[...] = value
        for prefix, bn in self.batch_norms().items():
            bn.running_mean = np.array(state[f"{prefix}.running_mean"], dtype=float)
            bn.running_var = np.array(state[f"{prefix}.running_var"], dtype=float)

    # -- forward ------------------------------------------------------------------

    def forward(self, batch: Batch, training: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        hp, dims = self.hp, self.dims
        x = apply_input_mask(batch.node_feats, batch.node_mask)
        st = self.stacks
        if hp.arch == "O":
            if dims.graph > 0:
                x = np.concatenate([x, batch.graph_vecs[batch.graph_id]], axis=1)
            h = st["node"](ad.Tensor(x), batch, training, rng)
        else:
            if hp.arch == "TE":
                e = st["embed"](self.embedding(batch.activity_ids), batch, training, rng)
                parts = [e]
                if "node" in st:
                    rest = ad.Tensor(x[:, dims.activity_width:])
                    parts.append(st["node"](rest, batch, training, rng))
                h = ad.concat_cols(*parts) if len(parts) > 1 else parts[0]
            else:
                h = st["node"](ad.Tensor(x), batch, training, rng)
                if hp.arch == "TP":
                    p = st["pseudo"](ad.Tensor(batch.pseudo_feats), batch, training, rng)
                    h = ad.concat_cols(h, p)
            if hp.arch in ("TP", "TE"):
                h = st["concat"](h, batch, training, rng)
        z = pool(h, batch.graph_id, batch.num_graphs, hp.pooling)
        if hp.arch != "O" and dims.graph > 0:
            g = st["graph"](ad.Tensor(batch.graph_vecs), None, training, rng)
            z = ad.concat_cols(z, g)
        z = st["head"](z, None, training, rng)
        return self.classifier(z)

    __call__ = forward


def build(hp: HyperParams, dims: InputDims, n_classes: int, seed: int = 0) -> Model:
    return Model(hp, dims, n_classes, seed)


def forward(model: Model, batch: Batch, training: bool = False, rng=None) -> Tensor:
    return model.forward(batch, training, rng)


# -- checkpoints ------------------------------------------------------------------

def checkpoint_dict(model: Model, class_names, refs: dict | None = None) -> dict:
    return {
        "spec": model.hp.to_dict(),
        "dims": asdict(model.dims),
        "class_names": list(class_names),
        "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                   for k, v in sorted(model.state_dict().items())},
        "refs": dict(refs or {}),
    }


def save_checkpoint(path, model: Model, class_names, refs: dict | None = None) -> None:
    with open(path, "w") as fh:
        json.dump(checkpoint_dict(model, class_names, refs), fh, indent=1, sort_keys=True)


def model_from_checkpoint(doc: dict) -> Model:
    hp = HyperParams.from_dict(doc["spec"])
    model = Model(hp, InputDims(**doc["dims"]), len(doc["class_names"]))
    state = {k: np.array(v["data"], dtype=float).reshape(v["shape"])
             for k, v in doc["params"].items()}
    model.load_state_dict(state)
    return model


def load_checkpoint(path) -> tuple[Model, dict]:
    with open(path) as fh:
        doc = json.load(fh)
    return model_from_checkpoint(doc), doc
