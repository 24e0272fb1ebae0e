"""Command-line entry point: prepare, tune, train, evaluate, report, synth.

Every command reads one JSON run config (``--config``). Relative paths in the
config resolve against the config file's directory. All randomness derives
from the config seed (or ``--seed``) through named substreams.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import eventlog
from .encode import EncoderState
from .eventlog import AttributeSchema, load_csv, write_csv
from .graphrep import WeightScaler, load_graphs, save_graphs
from .models import HyperParams, build, load_checkpoint, save_checkpoint
from .pipeline import featurize, input_dims, prepare
from .pseudoembed import BinningConfig, PseudoProvider
from .seeding import subseed, substream
from .trainer import TrainConfig, evaluate, train, write_curves
from .tuner import (IMBALANCED, SearchSpace, TuneConfig, TuneData, classify_dataset,
                    retrain_best, run_trial, tune)

log = logging.getLogger("eventgraph")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    data: Path
    schema: list[AttributeSchema]
    label_column: str = "label"
    models: list[str] = field(default_factory=lambda: ["T-gcnconv"])
    budget: int = 200
    seed: int = 0
    out: Path = Path("runs")
    train: TrainConfig = field(default_factory=TrainConfig)
    binning: BinningConfig = field(default_factory=BinningConfig)
    space: SearchSpace = field(default_factory=SearchSpace)
    dataset_kind: str | None = None
    imbalance_threshold: float = 1.5
    retrain: bool = False
    n_startup: int = 5
    warmup: int = 10

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        with open(path) as fh:
            d = json.load(fh)
        base = path.parent
        schema = d.get("schema")
        if isinstance(schema, str):
            with open(base / schema) as fh:
                schema = json.load(fh)
        if not schema or "data" not in d:
            raise ConfigError("config needs 'data' and 'schema'")
        models = d.get("models", ["T-gcnconv"])
        for m in models:
            arch, _, conv = m.partition("-")
            if arch not in ("O", "T", "TP", "TE") or conv not in ("gcnconv", "graphconv"):
                raise ConfigError(f"unknown model {m!r}; expected e.g. 'T-gcnconv'")
        kind = d.get("dataset_kind")
        if kind not in (None, "balanced", "imbalanced"):
            raise ConfigError(f"dataset_kind must be balanced or imbalanced, not {kind!r}")
        return cls(
            data=base / d["data"], schema=[AttributeSchema.from_dict(a) for a in schema],
            label_column=d.get("label_column", "label"), models=list(models),
            budget=int(d.get("budget", 200)), seed=int(d.get("seed", 0)),
            out=base / d.get("out", "runs"), train=TrainConfig(**d.get("train", {})),
            binning=BinningConfig(**d.get("binning", {})),
            space=SearchSpace.from_dict(d.get("search_space")), dataset_kind=kind,
            imbalance_threshold=float(d.get("imbalance_threshold", 1.5)),
            retrain=bool(d.get("retrain", False)),
            n_startup=int(d.get("n_startup", 5)), warmup=int(d.get("warmup", 10)),
        )

    def tune_config(self) -> TuneConfig:
        return TuneConfig(self.budget, self.train, self.space, self.n_startup, self.warmup)


def _dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _read(path: Path):
    with open(path) as fh:
        return json.load(fh)


# -- prepare ----------------------------------------------------------------------

def cmd_prepare(cfg: RunConfig) -> Path:
    ds = load_csv(cfg.data, cfg.schema, cfg.label_column)
    if any(m.startswith("TP-") for m in cfg.models) and not ds.has_durations():
        raise ConfigError("TP models need event durations, but every event in "
                          f"{cfg.data} has zero duration")
    prep = prepare(ds, cfg.train.split_fraction, subseed(cfg.seed, "prepare"), cfg.binning)
    d = cfg.out / "prepared"
    d.mkdir(parents=True, exist_ok=True)
    (d / "encoder.json").write_text(prep.state.to_json() + "\n")
    if prep.provider is not None:
        (d / "binning.json").write_text(prep.provider.to_json() + "\n")
    elif (d / "binning.json").exists():
        (d / "binning.json").unlink()
    _dump(d / "scaler.json", {"lo": prep.scaler.lo, "hi": prep.scaler.hi})
    kind = cfg.dataset_kind or classify_dataset(ds.class_counts(), cfg.imbalance_threshold)
    _dump(d / "split.json", {
        "class_names": list(ds.class_names), "class_counts": ds.class_counts().tolist(),
        "dataset_kind": kind, "seed": cfg.seed,
        "train": [t.case_id for t in prep.train.traces],
        "val": [t.case_id for t in prep.val.traces],
    })
    save_graphs(d / "train.npz", prep.train_graphs)
    save_graphs(d / "val.npz", prep.val_graphs)
    log.info("prepared %d train / %d val graphs (%s) in %s", len(prep.train_graphs),
             len(prep.val_graphs), kind, d)
    return d


@dataclass
class Artifacts:
    state: EncoderState
    provider: PseudoProvider | None
    scaler: WeightScaler
    manifest: dict
    data: TuneData


def load_artifacts(out: Path) -> Artifacts:
    d = out / "prepared"
    if not (d / "split.json").exists():
        raise ConfigError(f"no prepared artifacts under {d}; run 'prepare' first")
    state = EncoderState.from_json((d / "encoder.json").read_text())
    provider = None
    if (d / "binning.json").exists():
        provider = PseudoProvider.from_json((d / "binning.json").read_text())
    sc = _read(d / "scaler.json")
    manifest = _read(d / "split.json")
    data = TuneData(load_graphs(d / "train.npz"), load_graphs(d / "val.npz"),
                    input_dims(state, provider), manifest["class_names"],
                    manifest["dataset_kind"])
    return Artifacts(state, provider, WeightScaler(sc["lo"], sc["hi"]), manifest, data)


def _refs() -> dict:
    return {"encoder_state": "../prepared/encoder.json", "binning": "../prepared/binning.json",
            "scaler": "../prepared/scaler.json"}


# -- tune / train -----------------------------------------------------------------

def cmd_tune(cfg: RunConfig, jobs: int = 1) -> dict:
    art = load_artifacts(cfg.out)
    tcfg = cfg.tune_config()
    summary = {}
    for name in cfg.models:
        arch, conv = name.split("-")
        best, trials = tune(art.data, arch, conv, tcfg, cfg.seed, jobs, cfg.out / "ledger.jsonl")
        if cfg.retrain:
            model, res = retrain_best(best, art.data, cfg.train, cfg.seed)
            write_curves(cfg.out / "curves" / f"{name}-retrain.csv", res)
        else:
            # rerunning the winning trial reproduces its parameters exactly
            model = build(best.hp, art.data.dims, art.data.n_classes,
                          subseed(cfg.seed, "tune", name, best.id, "init"))
            train(model, art.data.train, art.data.val, best.hp, cfg.train, None, True,
                  substream(cfg.seed, "tune", name, best.id, "train"))
        ckpt = cfg.out / "checkpoints" / f"{name}.json"
        ckpt.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(ckpt, model, art.data.class_names, _refs())
        counts = {s: sum(t.status == s for t in trials) for s in ("completed", "pruned", "failed")}
        summary[name] = {"best_trial": best.id, "keys": vars(best.keys), "trials": counts,
                         "checkpoint": str(ckpt.relative_to(cfg.out)), "hp": best.hp.to_dict()}
        log.info("%s: best trial %d %s", name, best.id, vars(best.keys))
    _dump(cfg.out / "best.json", summary)
    return summary


def cmd_train(cfg: RunConfig, hp_path: Path, checkpoint: Path | None = None) -> Path:
    art = load_artifacts(cfg.out)
    hp = HyperParams.from_dict(_read(hp_path))
    model = build(hp, art.data.dims, art.data.n_classes, subseed(cfg.seed, "train", "init"))
    res = train(model, art.data.train, art.data.val, hp, cfg.train, None, True,
                substream(cfg.seed, "train", "loop"))
    ckpt = checkpoint or cfg.out / "checkpoints" / f"{hp.model_name}-manual.json"
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, model, art.data.class_names, _refs())
    write_curves(cfg.out / "curves" / f"{ckpt.stem}.csv", res)
    log.info("trained %s: best epoch %d, val loss %.4f", hp.model_name, res.best_epoch,
             res.best_val_loss)
    return ckpt


# -- evaluate / report ------------------------------------------------------------

def cmd_evaluate(cfg: RunConfig, checkpoint: Path, data: Path | None = None) -> Path:
    art = load_artifacts(cfg.out)
    model, doc = load_checkpoint(checkpoint)
    if data is None:
        graphs, source = art.data.val, "validation split"
    else:
        ds = load_csv(data, cfg.schema, cfg.label_column)
        if list(ds.class_names) != list(doc["class_names"]):
            raise ConfigError(f"{data}: classes {list(ds.class_names)} do not match the "
                              f"checkpoint's {doc['class_names']}")
        graphs = featurize(ds.traces, art.state, art.scaler, art.provider)
        source = str(data)
    loss, metrics, _ = evaluate(model, graphs, model.hp.loss)
    out = cfg.out / "metrics" / f"{Path(checkpoint).stem}.json"
    _dump(out, {"model": model.hp.model_name, "checkpoint": Path(checkpoint).name,
                "source": source, "class_names": doc["class_names"], "loss": loss,
                "metrics": metrics.to_dict()})
    log.info("%s: accuracy %.4f, weighted F1 %.4f", out.stem, metrics.accuracy,
             metrics.weighted_f1)
    return out


def report_rows(doc: dict) -> list[list]:
    """Per-class rows, then accuracy, macro and weighted averages."""
    m = doc["metrics"]
    sup = np.array(m["support"], dtype=float)
    n = int(sup.sum())
    rows = [[c, p, r, f, int(s)] for c, p, r, f, s in
            zip(doc["class_names"], m["precision"], m["recall"], m["f1"], m["support"])]
    rows.append(["accuracy", None, None, m["accuracy"], n])
    rows.append(["macro avg", float(np.mean(m["precision"])), float(np.mean(m["recall"])),
                 m["macro_f1"], n])
    w = sup / n if n else sup
    rows.append(["weighted avg", float(np.dot(w, m["precision"])), float(np.dot(w, m["recall"])),
                 m["weighted_f1"], n])
    return rows


def format_report(rows: list[list]) -> str:
    width = max(12, *(len(str(r[0])) for r in rows))
    head = f"{'':<{width}} {'precision':>9} {'recall':>9} {'f1-score':>9} {'support':>9}"
    lines = [head]
    for name, p, r, f, s in rows:
        cell = lambda v: f"{'':>9}" if v is None else f"{v:>9.4f}"  # noqa: E731
        if name == "accuracy":
            lines.append("")
        lines.append(f"{name:<{width}} {cell(p)} {cell(r)} {cell(f)} {s:>9d}")
    return "\n".join(lines) + "\n"


def cmd_report(cfg: RunConfig, metrics_files: list[Path] | None = None) -> list[Path]:
    files = metrics_files or sorted((cfg.out / "metrics").glob("*.json"))
    if not files:
        raise ConfigError(f"no metrics files under {cfg.out / 'metrics'}; run 'evaluate' first")
    rep = cfg.out / "report"
    rep.mkdir(parents=True, exist_ok=True)
    written = []
    for f in files:
        doc = _read(f)
        rows = report_rows(doc)
        with open(rep / f"{f.stem}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "precision", "recall", "f1", "support"])
            for r in rows:
                w.writerow(["" if v is None else v for v in r])
        text = format_report(rows)
        (rep / f"{f.stem}.txt").write_text(text)
        written += [rep / f"{f.stem}.csv", rep / f"{f.stem}.txt"]
    best = cfg.out / "best.json"
    if best.exists():
        for name, info in _read(best).items():
            src = cfg.out / "curves" / name / f"trial_{info['best_trial']:04d}.csv"
            if src.exists():
                shutil.copyfile(src, rep / f"curves_{name}.csv")
                written.append(rep / f"curves_{name}.csv")
    return written


# -- synth ------------------------------------------------------------------------

def cmd_synth(kind: str, out: Path, seed: int, n: int | None = None, classes: int = 3,
              ratios: list[float] | None = None) -> Path:
    if kind == "balanced":
        ds = eventlog.synth_balanced(n or 200, classes, seed)
    elif kind == "imbalanced":
        ds = eventlog.synth_imbalanced(n or 2000, ratios or eventlog.PATIENTS_LIKE_RATIOS, seed)
    else:
        raise ConfigError(f"unknown synthetic kind {kind!r}")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(ds, out)
    schema_path = out.with_suffix(".schema.json")
    _dump(schema_path, [a.to_dict() for a in ds.schema])
    _dump(out.with_suffix(".config.json"), {
        "data": out.name, "schema": schema_path.name, "label_column": "label",
        "models": ["T-gcnconv"], "budget": 25, "seed": seed, "out": f"{out.stem}_run",
        "dataset_kind": IMBALANCED if kind == "imbalanced" else "balanced",
    })
    return out


# -- argument parsing -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eventgraph", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, required=True)
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", type=Path, help="override the output directory")

    common(sub.add_parser("prepare", help="split, fit encoders and cache graphs"))
    t = sub.add_parser("tune", help="search hyperparameters for each configured model")
    common(t)
    t.add_argument("--jobs", type=int, default=1)
    t.add_argument("--budget", type=int, help="override the trial budget")
    tr = sub.add_parser("train", help="train one hyperparameter file")
    common(tr)
    tr.add_argument("--hp", type=Path, required=True)
    tr.add_argument("--checkpoint", type=Path)
    e = sub.add_parser("evaluate", help="score a checkpoint")
    common(e)
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--data", type=Path, help="CSV to score instead of the validation split")
    r = sub.add_parser("report", help="classification tables and learning curves")
    common(r)
    r.add_argument("--metrics", type=Path, nargs="*")
    s = sub.add_parser("synth", help="write a synthetic event log")
    s.add_argument("--kind", choices=("balanced", "imbalanced"), required=True)
    s.add_argument("--out", type=Path, required=True, help="CSV path")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n", type=int, help="traces per class (balanced) or in total")
    s.add_argument("--classes", type=int, default=3)
    s.add_argument("--ratios", type=float, nargs="*")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "synth":
            print(cmd_synth(args.kind, args.out, args.seed, args.n, args.classes, args.ratios))
            return 0
        cfg = RunConfig.load(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out is not None:
            cfg.out = args.out
        if args.command == "prepare":
            print(cmd_prepare(cfg))
        elif args.command == "tune":
            if args.budget is not None:
                cfg.budget = args.budget
            print(json.dumps(cmd_tune(cfg, args.jobs), indent=1, sort_keys=True))
        elif args.command == "train":
            print(cmd_train(cfg, args.hp, args.checkpoint))
        elif args.command == "evaluate":
            print(cmd_evaluate(cfg, args.checkpoint, args.data))
        elif args.command == "report":
            for path in cmd_report(cfg, args.metrics):
                print(path)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0
