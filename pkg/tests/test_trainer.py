import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from eventgraph.eventlog import synth_balanced
from eventgraph.models import Model
from eventgraph.optim import OptimizerSpec
from eventgraph.pipeline import prepare
from eventgraph.trainer import (EarlyStopper, Metrics, TrainConfig, TrainResult,
                                classification_report, confusion_matrix, evaluate, f1_score,
                                read_curves, split_indices, split_stratified, stop_epoch,
                                train, write_curves)

from helpers import small_hp
from oracles import brute_report


@pytest.fixture(scope="module")
def prepared():
    return prepare(synth_balanced(30, 3, 0), 0.8, 0)


def test_f1_hand():
    assert f1_score(0.0, 0.0) == 0.0
    assert f1_score(1.0, 1.0) == 1.0
    assert f1_score(0.5, 1.0) == pytest.approx(2 / 3)


def test_confusion_rows_are_truth():
    cm = confusion_matrix([0, 0, 1], [1, 1, 1], 2)
    assert cm.tolist() == [[0, 2], [0, 1]]
    with pytest.raises(ValueError):
        confusion_matrix([2], [0], 2)


def test_report_absent_class_is_zero():
    m = classification_report([0, 0], [0, 0], 3)
    assert m.precision == [1.0, 0.0, 0.0] and m.support == [2, 0, 0]
    assert m.weighted_f1 == 1.0 and m.macro_f1 == pytest.approx(1 / 3)
    assert Metrics.from_dict(m.to_dict()) == m


@given(st.integers(2, 5).flatmap(lambda c: st.tuples(
    st.just(c), st.lists(st.tuples(st.integers(0, c - 1), st.integers(0, c - 1)),
                         min_size=1, max_size=40))))
def test_report_matches_recount(case):
    c, pairs = case
    yt, yp = [a for a, _ in pairs], [b for _, b in pairs]
    m = classification_report(yt, yp, c)
    prec, rec, f1, sup, acc, macro, weighted = brute_report(yt, yp, c)
    assert m.precision == pytest.approx(prec, abs=1e-15)
    assert m.recall == pytest.approx(rec, abs=1e-15)
    assert m.f1 == pytest.approx(f1, abs=1e-15)
    assert m.support == sup and m.accuracy == pytest.approx(acc)
    assert m.macro_f1 == pytest.approx(macro) and m.weighted_f1 == pytest.approx(weighted)


def test_split_is_stratified_and_disjoint():
    labels = np.array([0] * 10 + [1] * 5 + [2] * 2)
    tr, va = split_indices(labels, 0.8, np.random.default_rng(0))
    assert set(tr).isdisjoint(va) and len(tr) + len(va) == len(labels)
    assert np.bincount(labels[tr]).tolist() == [8, 4, 1]
    with pytest.raises(ValueError):
        split_indices(np.array([0, 0, 1]), 0.8, np.random.default_rng(0))


def test_split_stratified_is_seeded():
    ds = synth_balanced(10, 2, 0)
    a, _ = split_stratified(ds, 0.8, 5)
    b, _ = split_stratified(ds, 0.8, 5)
    c, _ = split_stratified(ds, 0.8, 6)
    ids = lambda d: [t.case_id for t in d.traces]  # noqa: E731
    assert ids(a) == ids(b) and ids(a) != ids(c)


def test_early_stopper_counts_from_best():
    es = EarlyStopper(patience=3, min_delta=0.1)
    assert es.update(1, 1.0) == (True, False)
    assert es.update(2, 0.95) == (False, False)  # within min_delta
    assert es.update(3, 0.5) == (True, False)
    assert es.update(4, 0.6) == (False, False)
    assert es.update(5, 0.6) == (False, False)
    assert es.update(6, 0.6) == (False, True)


@given(st.lists(st.floats(0, 10), min_size=1, max_size=80), st.integers(1, 10))
def test_stop_epoch_property(values, patience):
    e = stop_epoch(values, patience, 1e-6)
    assert 1 <= e <= len(values)
    # no improvement in the last `patience` epochs before a genuine stop
    if e < len(values):
        best = min(values[:e - patience])
        assert all(v >= best - 1e-6 for v in values[e - patience:e])


def test_train_improves_and_restores_best(prepared):
    hp = small_hp("T", "gcnconv", batch_size=16)
    model = Model(hp, prepared.dims, 3, seed=0)
    before, _, _ = evaluate(model, prepared.val_graphs)
    res = train(model, prepared.train_graphs, prepared.val_graphs, hp,
                TrainConfig(max_epochs=15, patience=5))
    after, metrics, preds = evaluate(model, prepared.val_graphs)
    assert after < before
    assert after == pytest.approx(res.best_val_loss, abs=1e-12)
    assert res.val_loss[res.best_epoch - 1] == res.best_val_loss
    assert len(preds) == len(prepared.val_graphs)
    assert res.val_loss_std == pytest.approx(np.std(res.val_loss))


def test_train_is_deterministic(prepared):
    hp = small_hp("TE", "graphconv", dropout=0.3, batch_norm=True, batch_size=16)
    runs = []
    for _ in range(2):
        model = Model(hp, prepared.dims, 3, seed=2)
        runs.append(train(model, prepared.train_graphs, prepared.val_graphs, hp,
                          TrainConfig(max_epochs=4, seed=9)))
    assert runs[0].val_loss == runs[1].val_loss


def test_prune_hook_stops_run(prepared):
    hp = small_hp("T", "gcnconv")
    model = Model(hp, prepared.dims, 3)
    res = train(model, prepared.train_graphs, prepared.val_graphs, hp,
                TrainConfig(max_epochs=20), prune_hook=lambda e, v: e == 3)
    assert res.status == "pruned" and res.epochs_run == 3


def test_no_early_stopping_runs_all_epochs(prepared):
    hp = small_hp("T", "gcnconv", optimizer=OptimizerSpec("sgd", 0.0))
    model = Model(hp, prepared.dims, 3)
    res = train(model, prepared.train_graphs, prepared.val_graphs, hp,
                TrainConfig(max_epochs=5, patience=1), early_stopping=False)
    assert res.epochs_run == 5


def test_l1_shrinks_weights(prepared):
    norms = []
    for lam in (0.0, 0.05):
        hp = small_hp("T", "gcnconv", optimizer=OptimizerSpec("sgd", 0.05))
        hp.l1 = lam
        model = Model(hp, prepared.dims, 3, seed=1)
        train(model, prepared.train_graphs, prepared.val_graphs, hp,
              TrainConfig(max_epochs=5), early_stopping=False)
        norms.append(sum(np.abs(w.data).sum() for w in model.weight_matrices()))
    assert norms[1] < norms[0]


def test_curves_round_trip(prepared, tmp_path):
    hp = small_hp("O", "gcnconv")
    model = Model(hp, prepared.dims, 3)
    res = train(model, prepared.train_graphs, prepared.val_graphs, hp, TrainConfig(max_epochs=3))
    write_curves(tmp_path / "c.csv", res)
    assert read_curves(tmp_path / "c.csv") == res.curves()


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(max_epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(split_fraction=1.0)
    assert math.isnan(TrainResult().val_loss_std)
