"""Random-search tuning with median pruning and dataset-aware trial ranking."""
from __future__ import annotations

import json
import math
import multiprocessing as mp
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import ACTIVATIONS
from .graphrep import GraphInstance
from .models import (ARCHS, CONV_KINDS, BatchNormSpec, HyperParams, InputDims, LayerSpec,
                     Model, build)
from .optim import OptimizerSpec, SchedulerSpec
from .seeding import subseed, substream
from .trainer import EarlyStopper, TrainConfig, TrainResult, train, write_curves

BALANCED, IMBALANCED = "balanced", "imbalanced"
SCHEDULERS = ("step", "exponential", "plateau", "polynomial", "cosine", "cyclic", "one_cycle")


@dataclass
class SearchSpace:
    """Tuning ranges. Pairs are inclusive ``(lo, hi)``; tuples of names are choices."""

    conv_layers: tuple = (1, 5)
    dense_layers: tuple = (1, 3)
    units: tuple = (16, 512)
    dropout_rate: tuple = (0.2, 0.7)
    bn_momentum: tuple = (0.1, 0.999)
    bn_eps: tuple = (1e-5, 1e-2)
    activations: tuple = tuple(ACTIVATIONS)
    aggrs: tuple = ("add", "mean", "max")
    poolings: tuple = ("mean", "add", "max")
    embedding_dim: tuple = (10, 50)
    optimizers: tuple = ("adam", "sgd", "rmsprop")
    lr: tuple = (1e-5, 1e-2)
    weight_decay: tuple = (0.0, 1e-3)
    l1: tuple = (0.0, 1e-3)
    adam_beta1: tuple = (0.85, 0.99)
    adam_beta2: tuple = (0.99, 0.999)
    sgd_momentum: tuple = (0.0, 0.9)
    rms_alpha: tuple = (0.9, 0.999)
    rms_momentum: tuple = (0.0, 0.9)
    rms_eps: tuple = (1e-9, 1e-7)
    schedulers: tuple = SCHEDULERS
    step_size: tuple = (1, 50)
    step_gamma: tuple = (0.1, 0.9)
    exp_gamma: tuple = (0.85, 0.99)
    plateau_factor: tuple = (0.1, 0.9)
    plateau_patience: tuple = (1, 50)
    plateau_threshold: tuple = (1e-4, 1e-2)
    plateau_eps: tuple = (1e-8, 1e-4)
    poly_power: tuple = (0.1, 2.0)
    poly_total_iters: tuple = (2, 300)
    cos_t_max: tuple = (10, 100)
    cos_eta_min: tuple = (1e-6, 1e-2)
    cyc_base: tuple = (1e-5, 1e-2)
    cyc_max: tuple = (1e-3, 1e-1)
    cyc_step_up: tuple = (5, 200)
    oc_max: tuple = (1e-3, 1e-1)
    oc_pct: tuple = (0.1, 0.5)
    losses: tuple = ("cross_entropy", "multi_margin")
    batch_sizes: tuple = (16, 32, 64, 128, 512)

    def to_dict(self) -> dict:
        return {k: list(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict | None) -> "SearchSpace":
        d = d or {}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown search-space keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) for k, v in d.items()})


# -- sampling ---------------------------------------------------------------------

def _uniform(rng, r) -> float:
    return float(rng.uniform(r[0], r[1]))


def _log_uniform(rng, r) -> float:
    return float(10 ** rng.uniform(math.log10(r[0]), math.log10(r[1])))


def _int(rng, r) -> int:
    return int(rng.integers(r[0], r[1] + 1))


def _choice(rng, options):
    return options[int(rng.integers(len(options)))]


def _layer(rng, space: SearchSpace, aggr: bool, skip: bool) -> LayerSpec:
    units = _int(rng, space.units)
    act = _choice(rng, space.activations)
    has_skip = bool(rng.random() < 0.5) if skip else False
    rate = _uniform(rng, space.dropout_rate) if rng.random() < 0.5 else None
    bn = None
    if rng.random() < 0.5:
        bn = BatchNormSpec(_uniform(rng, space.bn_momentum), _uniform(rng, space.bn_eps))
    return LayerSpec(units, act, has_skip, rate, bn, _choice(rng, space.aggrs) if aggr else None)


def _stack(rng, space: SearchSpace, depth, conv: bool, graphconv: bool) -> list[LayerSpec]:
    n = _int(rng, depth)
    return [_layer(rng, space, aggr=conv and graphconv, skip=conv) for _ in range(n)]


def _optimizer(rng, space: SearchSpace) -> OptimizerSpec:
    kind = _choice(rng, space.optimizers)
    lr = _log_uniform(rng, space.lr)
    wd = _uniform(rng, space.weight_decay)
    if kind == "adam":
        p = {"beta1": _uniform(rng, space.adam_beta1), "beta2": _uniform(rng, space.adam_beta2)}
    elif kind == "sgd":
        p = {"momentum": _uniform(rng, space.sgd_momentum)}
    else:
        p = {"alpha": _uniform(rng, space.rms_alpha), "momentum": _uniform(rng, space.rms_momentum),
             "eps": _uniform(rng, space.rms_eps)}
    return OptimizerSpec(kind, lr, wd, p)


def _scheduler(rng, space: SearchSpace) -> SchedulerSpec | None:
    kind = _choice(rng, space.schedulers)
    s = space
    if kind == "none":
        return None
    if kind == "step":
        p = {"step_size": _int(rng, s.step_size), "gamma": _uniform(rng, s.step_gamma)}
    elif kind == "exponential":
        p = {"gamma": _uniform(rng, s.exp_gamma)}
    elif kind == "plateau":
        p = {"factor": _uniform(rng, s.plateau_factor), "patience": _int(rng, s.plateau_patience),
             "threshold": _uniform(rng, s.plateau_threshold), "eps": _uniform(rng, s.plateau_eps)}
    elif kind == "polynomial":
        p = {"power": _uniform(rng, s.poly_power), "total_iters": _int(rng, s.poly_total_iters)}
    elif kind == "cosine":
        p = {"t_max": _int(rng, s.cos_t_max), "eta_min": _uniform(rng, s.cos_eta_min)}
    elif kind == "cyclic":
        # resample until base < max; the two ranges overlap on [1e-3, 1e-2]
        while True:
            base, top = _log_uniform(rng, s.cyc_base), _log_uniform(rng, s.cyc_max)
            if base < top:
                break
        p = {"base_lr": base, "max_lr": top, "step_size_up": _int(rng, s.cyc_step_up)}
    elif kind == "one_cycle":
        p = {"max_lr": _uniform(rng, s.oc_max), "pct_start": _uniform(rng, s.oc_pct)}
    else:
        raise ValueError(f"unknown scheduler {kind!r}")
    return SchedulerSpec(kind, p)


def sample(space: SearchSpace, rng: np.random.Generator, arch: str, conv_kind: str
           ) -> HyperParams:
    """One uniform draw from ``space`` for the given architecture and convolution."""
    if arch not in ARCHS or conv_kind not in CONV_KINDS:
        raise ValueError(f"unknown model {arch}-{conv_kind}")
    gc = conv_kind == "graphconv"
    two_level = arch != "O"
    hp = HyperParams(
        arch=arch, conv_kind=conv_kind,
        node_layers=_stack(rng, space, space.conv_layers, True, gc),
        head_layers=_stack(rng, space, space.dense_layers, False, gc),
        graph_layers=_stack(rng, space, space.dense_layers, False, gc) if two_level else [],
        pseudo_layers=_stack(rng, space, space.conv_layers, True, gc) if arch == "TP" else [],
        embed_layers=_stack(rng, space, space.conv_layers, True, gc) if arch == "TE" else [],
        concat_layers=(_stack(rng, space, space.conv_layers, True, gc)
                       if arch in ("TP", "TE") else []),
        pooling=_choice(rng, space.poolings),
        embedding_dim=_int(rng, space.embedding_dim) if arch == "TE" else None,
        optimizer=_optimizer(rng, space),
        scheduler=_scheduler(rng, space),
        loss=_choice(rng, space.losses),
        batch_size=int(_choice(rng, space.batch_sizes)),
        l1=_uniform(rng, space.l1),
    )
    return hp


class RandomSampler:
    """History-free sampler; trials can therefore be drawn in any order."""

    def __call__(self, space: SearchSpace, rng, arch: str, conv_kind: str, history=()):
        return sample(space, rng, arch, conv_kind)


def _within(x, r) -> bool:
    return r[0] <= x <= r[1]


def validate_hp(hp: HyperParams, space: SearchSpace = SearchSpace()) -> list[str]:
    """Violations of ``space`` (empty when ``hp`` is admissible)."""
    bad = []
    try:
        hp.check_structure()
    except ValueError as e:
        bad.append(str(e))

    def check_stack(name, specs, depth, conv):
        if not _within(len(specs), depth):
            bad.append(f"{name}: depth {len(specs)}")
        for i, s in enumerate(specs):
            tag = f"{name}[{i}]"
            if not _within(s.units, space.units):
                bad.append(f"{tag}: units {s.units}")
            if s.activation not in space.activations:
                bad.append(f"{tag}: activation {s.activation}")
            if s.dropout is not None and not _within(s.dropout, space.dropout_rate):
                bad.append(f"{tag}: dropout {s.dropout}")
            if s.batch_norm is not None and not (
                    _within(s.batch_norm.momentum, space.bn_momentum)
                    and _within(s.batch_norm.eps, space.bn_eps)):
                bad.append(f"{tag}: batch norm {s.batch_norm}")
            if s.aggr is not None and s.aggr not in space.aggrs:
                bad.append(f"{tag}: aggr {s.aggr}")
            if s.skip and not conv:
                bad.append(f"{tag}: skip on a dense layer")

    check_stack("node", hp.node_layers, space.conv_layers, True)
    check_stack("head", hp.head_layers, space.dense_layers, False)
    if hp.graph_layers:
        check_stack("graph", hp.graph_layers, space.dense_layers, False)
    for name in ("pseudo_layers", "embed_layers", "concat_layers"):
        if getattr(hp, name):
            check_stack(name, getattr(hp, name), space.conv_layers, True)
    if hp.pooling not in space.poolings:
        bad.append(f"pooling {hp.pooling}")
    if hp.embedding_dim is not None and not _within(hp.embedding_dim, space.embedding_dim):
        bad.append(f"embedding_dim {hp.embedding_dim}")
    o = hp.optimizer
    if o.kind not in space.optimizers or not _within(o.lr, space.lr) \
            or not _within(o.weight_decay, space.weight_decay):
        bad.append(f"optimizer {o}")
    ranges = {"adam": {"beta1": space.adam_beta1, "beta2": space.adam_beta2},
              "sgd": {"momentum": space.sgd_momentum},
              "rmsprop": {"alpha": space.rms_alpha, "momentum": space.rms_momentum,
                          "eps": space.rms_eps}}.get(o.kind, {})
    if set(o.params) != set(ranges) or any(not _within(o.params[k], r) for k, r in ranges.items()):
        bad.append(f"optimizer params {o.params}")
    sc = hp.scheduler
    if sc is None:
        if "none" not in space.schedulers:
            bad.append("scheduler missing")
    else:
        s = space
        ranges = {
            "step": {"step_size": s.step_size, "gamma": s.step_gamma},
            "exponential": {"gamma": s.exp_gamma},
            "plateau": {"factor": s.plateau_factor, "patience": s.plateau_patience,
                        "threshold": s.plateau_threshold, "eps": s.plateau_eps},
            "polynomial": {"power": s.poly_power, "total_iters": s.poly_total_iters},
            "cosine": {"t_max": s.cos_t_max, "eta_min": s.cos_eta_min},
            "cyclic": {"base_lr": s.cyc_base, "max_lr": s.cyc_max,
                       "step_size_up": s.cyc_step_up},
            "one_cycle": {"max_lr": s.oc_max, "pct_start": s.oc_pct},
        }.get(sc.kind)
        if sc.kind not in space.schedulers or ranges is None:
            bad.append(f"scheduler {sc.kind}")
        elif set(sc.params) != set(ranges) or any(
                not _within(sc.params[k], r) for k, r in ranges.items()):
            bad.append(f"scheduler params {sc.params}")
        elif sc.kind == "cyclic" and not sc.params["base_lr"] < sc.params["max_lr"]:
            bad.append("cyclic base_lr must be below max_lr")
    if hp.loss not in space.losses:
        bad.append(f"loss {hp.loss}")
    if hp.batch_size not in space.batch_sizes:
        bad.append(f"batch_size {hp.batch_size}")
    if not _within(hp.l1, space.l1):
        bad.append(f"l1 {hp.l1}")
    return bad


# -- dataset kind, pruning, ranking -----------------------------------------------

def classify_dataset(class_counts: Sequence[int], threshold: float = 1.5) -> str:
    counts = np.asarray(class_counts, dtype=float)
    if counts.size < 2:
        raise ValueError("need at least two classes")
    if counts.min() == 0:
        return IMBALANCED
    return IMBALANCED if counts.max() / counts.min() > threshold else BALANCED


def prune_decision(history: Sequence[Sequence[float]], epoch: int, value: float,
                   n_startup: int = 5, warmup: int = 10) -> bool:
    """True to prune: ``value`` (a loss) is strictly above the completed trials' median.

    ``history`` holds the per-epoch loss curves of completed trials; ``epoch``
    counts from 1. Only curves that reached ``epoch`` take part.
    """
    if len(history) < n_startup or epoch < warmup:
        return False
    at = [c[epoch - 1] for c in history if len(c) >= epoch]
    if not at:
        return False
    return value > float(np.median(at))


@dataclass
class TrialKeys:
    accuracy: float
    weighted_f1: float
    val_loss: float
    val_loss_std: float
    best_epoch: int


@dataclass
class Trial:
    id: int
    hp: HyperParams
    status: str = "completed"  # completed | pruned | failed
    keys: TrialKeys | None = None
    epochs_run: int = 0
    error: str | None = None
    curves: list[dict] = field(default_factory=list, repr=False)
    curves_ref: str | None = None

    @property
    def val_losses(self) -> list[float]:
        return [row["val_loss"] for row in self.curves]

    def to_record(self, model_name: str) -> dict:
        return {"id": self.id, "model": model_name, "status": self.status,
                "keys": None if self.keys is None else asdict(self.keys),
                "epochs_run": self.epochs_run, "error": self.error,
                "curves": self.curves_ref, "hp": self.hp.to_dict()}

    @classmethod
    def from_record(cls, rec: dict) -> "Trial":
        keys = rec.get("keys")
        return cls(rec["id"], HyperParams.from_dict(rec["hp"]), rec["status"],
                   TrialKeys(**keys) if keys else None, rec.get("epochs_run", 0),
                   rec.get("error"), [], rec.get("curves"))


def rank_key(t: Trial, kind: str):
    k = t.keys
    if kind == BALANCED:
        return (-k.accuracy, k.val_loss_std, k.val_loss, t.id)
    if kind == IMBALANCED:
        return (-k.weighted_f1, k.val_loss, k.val_loss_std, t.id)
    raise ValueError(f"unknown dataset kind {kind!r}")


def rank_trials(trials: Sequence[Trial], kind: str) -> list[Trial]:
    """Completed trials, best first; pruned and failed trials are excluded."""
    done = [t for t in trials if t.status == "completed" and t.keys is not None]
    if not done:
        raise ValueError("no completed trials to rank")
    return sorted(done, key=lambda t: rank_key(t, kind))


# -- running trials ---------------------------------------------------------------

@dataclass
class TuneData:
    train: list[GraphInstance]
    val: list[GraphInstance]
    dims: InputDims
    class_names: list[str]
    kind: str

    @property
    def n_classes(self) -> int:
        return len(self.class_names)


@dataclass
class TuneConfig:
    budget: int = 200
    train: TrainConfig = field(default_factory=TrainConfig)
    space: SearchSpace = field(default_factory=SearchSpace)
    n_startup: int = 5
    warmup: int = 10


def keys_from_curves(curves: list[dict], train_cfg: TrainConfig, upto: int | None = None
                     ) -> TrialKeys:
    """Ranking keys recomputed from the first ``upto`` epochs of a learning curve."""
    rows = curves[:upto] if upto is not None else curves
    es = EarlyStopper(train_cfg.patience, train_cfg.min_delta)
    for r in rows:
        es.update(r["epoch"], r["val_loss"])
    best = rows[es.best_epoch - 1]
    return TrialKeys(best["val_accuracy"], best["val_weighted_f1"], best["val_loss"],
                     float(np.std([r["val_loss"] for r in rows])), es.best_epoch)


def _trial_seeds(seed: int, model_name: str, tid: int):
    return (substream(seed, "tune", model_name, tid, "sample"),
            subseed(seed, "tune", model_name, tid, "init"),
            substream(seed, "tune", model_name, tid, "train"))


def run_trial(tid: int, hp: HyperParams, data: TuneData, cfg: TuneConfig, seed: int,
              history: Sequence[Sequence[float]] | None) -> Trial:
    """Train one configuration. ``history=None`` disables in-flight pruning."""
    _, init_seed, train_rng = _trial_seeds(seed, hp.model_name, tid)
    hook = None
    if history is not None:
        hook = lambda e, v: prune_decision(history, e, v, cfg.n_startup, cfg.warmup)  # noqa: E731
    trial = Trial(tid, hp)
    try:
        model = build(hp, data.dims, data.n_classes, init_seed)
        res: TrainResult = train(model, data.train, data.val, hp, cfg.train, hook, True, train_rng)
    except (FloatingPointError, OverflowError) as e:
        trial.status, trial.error = "failed", f"{type(e).__name__}: {e}"
        return trial
    trial.status = res.status
    trial.curves = res.curves()
    trial.epochs_run = res.epochs_run
    trial.keys = keys_from_curves(trial.curves, cfg.train)
    return trial


def replay_pruning(trial: Trial, history: Sequence[Sequence[float]], cfg: TuneConfig) -> Trial:
    """Apply the pruning rule after the fact to an unpruned run.

    Training is deterministic per trial and pruning only truncates it, so the
    result equals what in-flight pruning against ``history`` would produce.
    """
    if trial.status != "completed":
        return trial
    for row in trial.curves:
        if prune_decision(history, row["epoch"], row["val_loss"], cfg.n_startup, cfg.warmup):
            e = row["epoch"]
            trial.curves = trial.curves[:e]
            trial.epochs_run = e
            trial.status = "pruned"
            trial.keys = keys_from_curves(trial.curves, cfg.train)
            break
    return trial


_WORKER: dict = {}


def _worker_init(data, cfg, seed):
    _WORKER.update(data=data, cfg=cfg, seed=seed)


def _worker_run(args):
    tid, hp_dict = args
    w = _WORKER
    return run_trial(tid, HyperParams.from_dict(hp_dict), w["data"], w["cfg"], w["seed"], None)


class Ledger:
    """Append-only JSON-lines trial log with per-trial curve CSVs."""

    def __init__(self, path, model_name: str):
        self.path = Path(path)
        self.model_name = model_name
        self.curve_dir = self.path.parent / "curves" / model_name

    def load(self) -> list[Trial]:
        if not self.path.exists():
            return []
        from .trainer import read_curves
        out = []
        with open(self.path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                if rec["model"] != self.model_name:
                    continue
                t = Trial.from_record(rec)
                if t.curves_ref:
                    t.curves = read_curves(self.path.parent / t.curves_ref)
                out.append(t)
        return out

    def append(self, trial: Trial) -> None:
        if trial.curves:
            self.curve_dir.mkdir(parents=True, exist_ok=True)
            name = f"trial_{trial.id:04d}.csv"
            res = TrainResult(**{k: [r[k] for r in trial.curves] for k in
                                 ("train_loss", "val_loss", "val_accuracy", "val_weighted_f1", "lr")})
            write_curves(self.curve_dir / name, res)
            trial.curves_ref = os.path.relpath(self.curve_dir / name, self.path.parent)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a") as fh:
            fh.write(json.dumps(trial.to_record(self.model_name), sort_keys=True) + "\n")


def tune(data: TuneData, arch: str, conv_kind: str, cfg: TuneConfig = TuneConfig(),
         seed: int = 0, jobs: int = 1, ledger_path=None, sampler=RandomSampler(),
         budget: int | None = None) -> tuple[Trial, list[Trial]]:
    """Run ``budget`` trials for one architecture and return ``(best, all trials)``.

    With ``jobs > 1`` trials run in waves on a process pool without in-flight
    pruning; pruning is replayed afterwards in trial order, which reproduces
    the serial outcome exactly.
    """
    budget = cfg.budget if budget is None else budget
    if budget < 1:
        raise ValueError("budget must be at least 1")
    model_name = f"{arch}-{conv_kind}"
    ledger = Ledger(ledger_path, model_name) if ledger_path is not None else None
    trials = ledger.load() if ledger is not None else []
    done_ids = {t.id for t in trials}

    def history_before(tid):
        return [t.val_losses for t in trials if t.status == "completed" and t.id < tid]

    def record(t: Trial):
        trials.append(t)
        if ledger is not None:
            ledger.append(t)

    todo = [tid for tid in range(budget) if tid not in done_ids]
    hps = {tid: sampler(cfg.space, _trial_seeds(seed, model_name, tid)[0], arch, conv_kind)
           for tid in todo}
    if jobs <= 1:
        for tid in todo:
            record(run_trial(tid, hps[tid], data, cfg, seed, history_before(tid)))
    else:
        ctx = mp.get_context("fork")
        with ProcessPoolExecutor(jobs, ctx, initializer=_worker_init,
                                 initargs=(data, cfg, seed)) as pool:
            for start in range(0, len(todo), jobs):
                wave = todo[start:start + jobs]
                results = pool.map(_worker_run, [(tid, hps[tid].to_dict()) for tid in wave])
                for t in results:
                    record(replay_pruning(t, history_before(t.id), cfg))

    trials.sort(key=lambda t: t.id)
    try:
        best = rank_trials(trials, data.kind)[0]
    except ValueError:
        causes = "; ".join(f"trial {t.id}: {t.error or t.status}" for t in trials)
        raise RuntimeError(f"{model_name}: no trial completed ({causes})") from None
    return best, trials


def retrain_best(best: Trial, data: TuneData, train_cfg: TrainConfig, seed: int = 0
                 ) -> tuple[Model, TrainResult]:
    """Rebuild the winner with a fresh init and train every epoch without early stopping."""
    if best.status != "completed":
        raise ValueError("only a completed trial can be retrained")
    name = best.hp.model_name
    model = build(best.hp, data.dims, data.n_classes, subseed(seed, "retrain", name, "init"))
    res = train(model, data.train, data.val, best.hp, train_cfg, None, False,
                substream(seed, "retrain", name, "train"))
    return model, res
