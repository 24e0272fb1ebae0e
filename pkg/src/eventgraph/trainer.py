"""Stratified splits, the epoch loop with early stopping, and classification metrics."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .eventlog import Dataset
from .graphrep import Batch, GraphInstance, make_batch
from .layers import LOSSES
from .models import HyperParams, Model
from .optim import Scheduler, l1_penalty, make_optimizer
from .seeding import substream

CURVE_COLUMNS = ("epoch", "train_loss", "val_loss", "val_accuracy", "val_weighted_f1", "lr")
EVAL_CHUNK = 512


@dataclass
class TrainConfig:
    max_epochs: int = 300
    patience: int = 30
    min_delta: float = 1e-6
    split_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.max_epochs < 1 or self.patience < 1:
            raise ValueError("max_epochs and patience must be positive")
        if not 0.0 < self.split_fraction < 1.0:
            raise ValueError("split_fraction must lie in (0, 1)")


# -- metrics ----------------------------------------------------------------------

@dataclass
class Metrics:
    precision: list[float]
    recall: list[float]
    f1: list[float]
    support: list[int]
    accuracy: float
    macro_f1: float
    weighted_f1: float
    confusion: list[list[int]]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Metrics":
        return cls(**d)


def f1_score(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2.0 * p * r / (p + r)


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    for y in (y_true, y_pred):
        if y.size and (y.min() < 0 or y.max() >= n_classes):
            raise ValueError("label out of range")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def classification_report(y_true, y_pred, n_classes: int) -> Metrics:
    """Per-class precision/recall/F1 plus accuracy, macro and weighted F1.

    Rows of the confusion matrix are true classes, columns predictions.
    Undefined ratios (empty denominators) are reported as 0.
    """
    cm = confusion_matrix(y_true, y_pred, n_classes)
    tp = np.diag(cm).astype(float)
    pred_tot = cm.sum(axis=0)
    support = cm.sum(axis=1)
    prec = np.divide(tp, pred_tot, out=np.zeros(n_classes), where=pred_tot > 0)
    rec = np.divide(tp, support, out=np.zeros(n_classes), where=support > 0)
    f1 = np.array([f1_score(p, r) for p, r in zip(prec, rec)])
    n = int(support.sum())
    return Metrics(
        precision=prec.tolist(), recall=rec.tolist(), f1=f1.tolist(),
        support=support.tolist(),
        accuracy=float(tp.sum() / n) if n else 0.0,
        macro_f1=float(f1.mean()),
        weighted_f1=float((f1 * support).sum() / n) if n else 0.0,
        confusion=cm.tolist(),
    )


# -- splitting --------------------------------------------------------------------

def split_indices(labels, fraction: float, rng: np.random.Generator
                  ) -> tuple[np.ndarray, np.ndarray]:
    labels = np.asarray(labels)
    train, val = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if idx.size < 2:
            raise ValueError(f"class {c} has {idx.size} member(s); at least 2 are needed")
        idx = rng.permutation(idx)
        k = max(1, math.floor(fraction * idx.size))
        train.append(idx[:k])
        val.append(idx[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(val))


def split_stratified(dataset: Dataset, fraction: float = 0.8, seed: int = 0
                     ) -> tuple[Dataset, Dataset]:
    tr, va = split_indices(dataset.labels, fraction, substream(seed, "split"))
    return dataset.subset(tr), dataset.subset(va)


# -- early stopping ---------------------------------------------------------------

class EarlyStopper:
    """Tracks the best monitored loss; epochs are numbered from 1."""

    def __init__(self, patience: int = 30, min_delta: float = 1e-6):
        self.patience, self.min_delta = patience, min_delta
        self.best = math.inf
        self.best_epoch = 0

    def update(self, epoch: int, value: float) -> tuple[bool, bool]:
        """Returns ``(improved, should_stop)``."""
        improved = value < self.best - self.min_delta
        if improved:
            self.best, self.best_epoch = value, epoch
        return improved, epoch - self.best_epoch >= self.patience


def stop_epoch(values: Sequence[float], patience: int = 30, min_delta: float = 1e-6) -> int:
    """Epoch at which early stopping fires on ``values`` (or ``len(values)``)."""
    es = EarlyStopper(patience, min_delta)
    for e, v in enumerate(values, start=1):
        if es.update(e, v)[1]:
            return e
    return len(values)


# -- training ---------------------------------------------------------------------

@dataclass
class TrainResult:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    val_weighted_f1: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf
    best_metrics: Metrics | None = None
    status: str = "completed"
    state: dict | None = field(default=None, repr=False)

    @property
    def epochs_run(self) -> int:
        return len(self.val_loss)

    @property
    def val_loss_std(self) -> float:
        return float(np.std(self.val_loss)) if self.val_loss else math.nan

    def curves(self) -> list[dict]:
        return [dict(epoch=i + 1, train_loss=self.train_loss[i], val_loss=self.val_loss[i],
                     val_accuracy=self.val_accuracy[i], val_weighted_f1=self.val_weighted_f1[i],
                     lr=self.lr[i]) for i in range(self.epochs_run)]


def _batches(graphs: Sequence[GraphInstance], size: int) -> list[Batch]:
    return [make_batch(graphs[i:i + size]) for i in range(0, len(graphs), size)]


def evaluate(model: Model, graphs: Sequence[GraphInstance] | Sequence[Batch],
             loss_name: str = "cross_entropy"):
    """Eval-mode loss (sample-weighted over chunks), metrics and predictions."""
    batches = graphs if graphs and isinstance(graphs[0], Batch) else _batches(graphs, EVAL_CHUNK)
    loss_fn = LOSSES[loss_name]
    total, n, preds, labels = 0.0, 0, [], []
    for b in batches:
        logits = model.forward(b, training=False)
        total += float(loss_fn(logits, b.labels).data) * b.num_graphs
        n += b.num_graphs
        preds.append(np.argmax(logits.data, axis=1))
        labels.append(b.labels)
    y_pred, y_true = np.concatenate(preds), np.concatenate(labels)
    return total / n, classification_report(y_true, y_pred, model.n_classes), y_pred


PruneHook = Callable[[int, float], bool]


def train(model: Model, train_graphs: Sequence[GraphInstance],
          val_graphs: Sequence[GraphInstance], hp: HyperParams,
          config: TrainConfig = TrainConfig(), prune_hook: PruneHook | None = None,
          early_stopping: bool = True, rng: np.random.Generator | None = None) -> TrainResult:
    """Fit ``model`` in place and leave it holding the best-epoch parameters.

    ``prune_hook(epoch, val_loss)`` is consulted after every epoch; a true
    return aborts the run with status ``pruned``. Non-finite values raise
    :class:`autodiff.NumericError`.
    """
    if not train_graphs or not val_graphs:
        raise ValueError("train and validation sets must be non-empty")
    rng = substream(config.seed, "train") if rng is None else rng
    loss_fn = LOSSES[hp.loss]
    params = list(model.parameters().values())
    weights = model.weight_matrices()
    opt = make_optimizer(hp.optimizer, params)
    n_batches = math.ceil(len(train_graphs) / hp.batch_size)
    sched = Scheduler(hp.scheduler, hp.optimizer.lr, n_batches)
    val_batches = _batches(val_graphs, EVAL_CHUNK)
    stopper = EarlyStopper(config.patience, config.min_delta)
    res = TrainResult()

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train_graphs))
        epoch_lr = sched.lr
        running, seen = 0.0, 0
        for s in range(0, len(order), hp.batch_size):
            batch = make_batch([train_graphs[i] for i in order[s:s + hp.batch_size]])
            opt.lr = sched.lr
            with ad.Tape() as tape:
                logits = model.forward(batch, training=True, rng=rng)
                task = loss_fn(logits, batch.labels)
                loss = task + l1_penalty(weights, hp.l1) if hp.l1 else task
                opt.zero_grad()
                tape.backward(loss)
            opt.step()
            sched.batch_end()
            running += float(task.data) * batch.num_graphs
            seen += batch.num_graphs

        val_loss, metrics, _ = evaluate(model, val_batches, hp.loss)
        if not math.isfinite(val_loss):
            raise ad.NumericError(f"validation loss became {val_loss}")
        sched.epoch_end(val_loss)
        res.train_loss.append(running / seen)
        res.val_loss.append(val_loss)
        res.val_accuracy.append(metrics.accuracy)
        res.val_weighted_f1.append(metrics.weighted_f1)
        res.lr.append(epoch_lr)

        improved, stop = stopper.update(epoch, val_loss)
        if improved:
            res.best_epoch, res.best_val_loss, res.best_metrics = epoch, val_loss, metrics
            res.state = model.state_dict()
        if prune_hook is not None and prune_hook(epoch, val_loss):
            res.status = "pruned"
            break
        if early_stopping and stop:
            break

    if res.state is not None:
        model.load_state_dict(res.state)
    return res


def write_curves(path, result: TrainResult) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CURVE_COLUMNS)
        w.writeheader()
        for row in result.curves():
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def read_curves(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]
