"""Train O, T and TE (both convolutions) on the balanced synthetic log.

Prints the best validation accuracy of every model for each seed.
Usage: python3 scripts/run_balanced_band.py [--seeds 5] [--per-class 200]
"""
import argparse
import time

from eventgraph.eventlog import synth_balanced
from eventgraph.models import Model
from eventgraph.pipeline import prepare
from eventgraph.presets import band_hp
from eventgraph.trainer import TrainConfig, train

MODELS = [(a, c) for a in ("O", "T", "TE") for c in ("gcnconv", "graphconv")]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--per-class", type=int, default=200)
    args = ap.parse_args()
    start = time.perf_counter()
    for seed in range(args.seeds):
        p = prepare(synth_balanced(args.per_class, 3, seed), 0.8, seed)
        cells = []
        for arch, conv in MODELS:
            hp = band_hp(arch, conv)
            res = train(Model(hp, p.dims, 3, seed=seed), p.train_graphs, p.val_graphs, hp,
                        TrainConfig(seed=seed))
            cells.append(f"{arch}-{conv}={max(res.val_accuracy):.3f}@{res.epochs_run}")
        print(f"seed {seed}: " + "  ".join(cells), flush=True)
    print(f"total {time.perf_counter() - start:.0f}s")


if __name__ == "__main__":
    main()
