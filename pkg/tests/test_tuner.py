import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eventgraph import tuner
from eventgraph.eventlog import synth_balanced, synth_imbalanced
from eventgraph.models import ARCHS, CONV_KINDS
from eventgraph.pipeline import prepare
from eventgraph.presets import band_hp
from eventgraph.trainer import TrainConfig
from eventgraph.tuner import (BALANCED, IMBALANCED, SearchSpace, Trial, TrialKeys, TuneConfig,
                              classify_dataset, keys_from_curves, prune_decision, rank_trials,
                              retrain_best, sample, tune, validate_hp)

from helpers import small_hp

TINY_SPACE = SearchSpace(conv_layers=(1, 2), dense_layers=(1, 1), units=(8, 16),
                         batch_sizes=(16, 32))


@pytest.fixture(scope="module")
def data():
    return prepare(synth_balanced(16, 3, 0), 0.75, 0).tune_data()


def tiny_cfg(budget=4, epochs=12, **kw):
    return TuneConfig(budget=budget, train=TrainConfig(max_epochs=epochs, patience=4),
                      space=TINY_SPACE, **kw)


# -- dataset kind ------------------------------------------------------------------

def test_classify_cases():
    assert classify_dataset([200, 200, 200]) == BALANCED
    assert classify_dataset([174, 5]) == IMBALANCED
    assert classify_dataset([100, 70]) == BALANCED
    assert classify_dataset([100, 66]) == IMBALANCED
    with pytest.raises(ValueError):
        classify_dataset([3])


# -- sampling ----------------------------------------------------------------------

def test_log_uniform_lr_median():
    rng = np.random.default_rng(0)
    lr = SearchSpace().lr
    draws = np.log10([tuner._log_uniform(rng, lr) for _ in range(10**6)])
    assert abs(np.median(draws) + 3.5) < 0.05
    assert draws.min() >= -5 and draws.max() <= -2


@pytest.mark.parametrize("arch", ARCHS)
@pytest.mark.parametrize("conv", CONV_KINDS)
def test_samples_are_admissible(arch, conv):
    rng = np.random.default_rng(1)
    space = SearchSpace(schedulers=tuner.SCHEDULERS + ("none",))
    for _ in range(150):
        hp = sample(space, rng, arch, conv)
        assert validate_hp(hp, space) == []
        assert hp.batch_size in (16, 32, 64, 128, 512)
        for spec in hp.conv_specs():
            assert (spec.aggr is not None) == (conv == "graphconv")
        for spec in hp.head_layers + hp.graph_layers:
            assert not spec.skip


def test_sampled_lr_is_log_uniform():
    rng = np.random.default_rng(2)
    lrs = np.log10([sample(SearchSpace(), rng, "T", "gcnconv").optimizer.lr for _ in range(3000)])
    assert abs(np.median(lrs) + 3.5) < 0.1


def test_validate_flags_violations():
    hp = small_hp("T", "gcnconv", units=4)
    bad = validate_hp(hp)
    assert any("units" in b for b in bad)
    hp.head_layers[0].skip = True
    assert any("skip" in b for b in validate_hp(hp))


def test_space_dict_round_trip():
    s = SearchSpace(units=(8, 32))
    assert SearchSpace.from_dict(json.loads(json.dumps(s.to_dict()))) == s
    with pytest.raises(ValueError):
        SearchSpace.from_dict({"unit": [1, 2]})


# -- pruning -----------------------------------------------------------------------

def test_prune_cases():
    hist4 = [[1.0] * 20] * 4
    assert not prune_decision(hist4, 12, 99.0)
    hist = [[v] * 20 for v in (0.1, 0.2, 0.3, 0.4, 0.5)]
    assert not prune_decision(hist, 12, 0.3)
    assert prune_decision(hist, 12, 0.31)
    assert not prune_decision(hist, 9, 5.0)  # warm-up


def test_prune_ignores_short_curves():
    hist = [[0.1] * 5] * 5 + [[1.0] * 20]
    assert not prune_decision(hist, 12, 0.9)
    assert prune_decision(hist, 12, 1.1)


# -- ranking -----------------------------------------------------------------------

def trial(i, acc=0.5, f1=0.5, loss=1.0, std=0.1, status="completed"):
    return Trial(i, small_hp("T", "gcnconv"), status, TrialKeys(acc, f1, loss, std, 1))


def test_rank_hand_cases():
    a, b = trial(0, f1=0.90, loss=0.30, std=0.05), trial(1, f1=0.90, loss=0.25, std=0.07)
    assert rank_trials([a, b], IMBALANCED)[0] is b
    a, b = trial(0, acc=1.0, std=0.02), trial(1, acc=1.0, std=0.01)
    assert rank_trials([a, b], BALANCED)[0] is b
    a, b = trial(0, f1=0.91, loss=9.0, std=9.0), trial(1, f1=0.90, loss=0.0, std=0.0)
    assert rank_trials([a, b], IMBALANCED)[0] is a


def test_rank_excludes_unfinished():
    ts = [trial(0, acc=1.0, status="pruned"), trial(1, acc=0.2)]
    assert [t.id for t in rank_trials(ts, BALANCED)] == [1]
    with pytest.raises(ValueError):
        rank_trials([trial(0, status="failed")], BALANCED)
    with pytest.raises(ValueError):
        rank_trials([trial(0)], "skewed")


@settings(max_examples=200)
@given(st.lists(st.tuples(st.sampled_from([0.5, 0.9, 1.0]), st.sampled_from([0.1, 0.2]),
                          st.sampled_from([0.01, 0.02]), st.sampled_from(["completed", "pruned"])),
                min_size=1, max_size=12), st.sampled_from([BALANCED, IMBALANCED]))
def test_rank_is_lexicographic(rows, kind):
    ts = [trial(i, acc=m, f1=m, loss=l, std=s, status=st_) for i, (m, l, s, st_) in
          enumerate(rows)]
    if not any(t.status == "completed" for t in ts):
        return
    ranked = rank_trials(ts, kind)
    for x, y in zip(ranked, ranked[1:]):
        kx, ky = tuner.rank_key(x, kind), tuner.rank_key(y, kind)
        assert kx < ky


def test_keys_from_curves():
    curves = [dict(epoch=e, train_loss=0.0, val_loss=v, val_accuracy=a, val_weighted_f1=a, lr=0.1)
              for e, (v, a) in enumerate([(1.0, 0.1), (0.5, 0.7), (0.6, 0.9)], start=1)]
    k = keys_from_curves(curves, TrainConfig())
    assert (k.best_epoch, k.accuracy, k.val_loss) == (2, 0.7, 0.5)
    assert k.val_loss_std == pytest.approx(np.std([1.0, 0.5, 0.6]))
    assert keys_from_curves(curves, TrainConfig(), upto=1).best_epoch == 1


# -- tuning ------------------------------------------------------------------------

def test_budget_one(data):
    best, trials = tune(data, "T", "gcnconv", tiny_cfg(budget=1), seed=0)
    assert len(trials) == 1 and best is trials[0]


def test_winner_follows_ranking(data, monkeypatch):
    rng = np.random.default_rng(5)

    def fake(tid, hp, data, cfg, seed, history):
        t = Trial(tid, hp, "completed", TrialKeys(float(rng.choice([0.8, 0.9])),
                                                  float(rng.random()), float(rng.random()),
                                                  float(rng.random()), 1))
        t.curves = [dict(epoch=1, val_loss=t.keys.val_loss)]
        return t

    monkeypatch.setattr(tuner, "run_trial", fake)
    best, trials = tune(data, "T", "gcnconv", tiny_cfg(budget=30), seed=0)
    assert best is sorted(trials, key=lambda t: (-t.keys.accuracy, t.keys.val_loss_std,
                                                  t.keys.val_loss, t.id))[0]


def test_serial_is_repeatable(data):
    cfg = tiny_cfg(budget=3, epochs=6)
    a, ta = tune(data, "TE", "graphconv", cfg, seed=3)
    b, tb = tune(data, "TE", "graphconv", cfg, seed=3)
    assert a.hp == b.hp and a.id == b.id
    assert [t.curves for t in ta] == [t.curves for t in tb]


def test_parallel_matches_serial(data):
    cfg = tiny_cfg(budget=6, epochs=10, n_startup=2, warmup=2)
    s_best, s_trials = tune(data, "T", "gcnconv", cfg, seed=1, jobs=1)
    p_best, p_trials = tune(data, "T", "gcnconv", cfg, seed=1, jobs=2)
    assert [(t.id, t.status, t.epochs_run) for t in s_trials] == \
           [(t.id, t.status, t.epochs_run) for t in p_trials]
    assert [t.curves for t in s_trials] == [t.curves for t in p_trials]
    assert s_best.id == p_best.id


def test_ledger_resume(data, tmp_path):
    cfg = tiny_cfg(budget=4, epochs=5)
    full_best, full = tune(data, "O", "gcnconv", cfg, seed=2)
    path = tmp_path / "ledger.jsonl"
    tune(data, "O", "gcnconv", cfg, seed=2, ledger_path=path, budget=2)
    best, resumed = tune(data, "O", "gcnconv", cfg, seed=2, ledger_path=path)
    lines = path.read_text().splitlines()
    assert len(lines) == 4
    assert [json.loads(x)["id"] for x in lines] == [0, 1, 2, 3]
    assert [t.keys for t in resumed] == [t.keys for t in full]
    assert best.id == full_best.id
    for rec in map(json.loads, lines):
        assert (path.parent / rec["curves"]).exists()


def test_failures_are_recorded(data, monkeypatch):
    def boom(*a, **k):
        raise FloatingPointError("nan in loss")

    monkeypatch.setattr(tuner, "train", boom)
    with pytest.raises(RuntimeError, match="nan in loss"):
        tune(data, "T", "gcnconv", tiny_cfg(budget=2), seed=0)


def test_programming_errors_propagate(data, monkeypatch):
    def broken(*a, **k):
        raise KeyError("bug")

    monkeypatch.setattr(tuner, "train", broken)
    with pytest.raises(KeyError):
        tune(data, "T", "gcnconv", tiny_cfg(budget=1), seed=0)


@pytest.mark.parametrize("seed", [0, 2])
def test_retrain_runs_every_epoch(seed):
    data = prepare(synth_imbalanced(400, seed=seed), 0.8, seed).tune_data()
    best = tuner.run_trial(0, band_hp("T", "gcnconv"), data, TuneConfig(), seed, None)
    model, res = retrain_best(best, data, TrainConfig(), seed=seed)
    assert res.epochs_run == 300
    assert res.best_metrics.weighted_f1 == res.val_weighted_f1[res.best_epoch - 1]
    assert abs(res.best_metrics.weighted_f1 - best.keys.weighted_f1) <= 0.03
    assert not math.isnan(res.val_loss_std)


def test_retrain_rejects_pruned(data):
    t = trial(0, status="pruned")
    with pytest.raises(ValueError):
        retrain_best(t, data, TrainConfig())
