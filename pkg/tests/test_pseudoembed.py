import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eventgraph.eventlog import CaseTrace, EventRecord, synth_balanced, synth_imbalanced
from eventgraph.pseudoembed import (BinningConfig, DurationBinning, PseudoProvider, TfidfCorpus,
                                    assign_bin, fit_binning, fit_corpus, pseudo_matrix,
                                    round_duration)

from oracles import brute_assign, brute_binning

HAND = [0, 0, 60, 60, 60, 120, 600, 1200, 1800, 2400]


def test_hand_binning():
    b = fit_binning(HAND, BinningConfig(t_cut=300, n_quantile=2))
    assert b.unique_bins == (0.0, 60.0, 120.0)
    assert b.quantile_edges == (1500.0,)
    assert b.n_bins == 5 and b.balance == 1.0 and b.iterations == 1


@pytest.mark.parametrize("d, expected", [(0, 0), (60, 1), (90, 1), (100, 2), (250, 2),
                                         (300, 3), (700, 3), (1500, 4), (10**6, 4)])
def test_hand_assignment(d, expected):
    b = fit_binning(HAND, BinningConfig(t_cut=300, n_quantile=2))
    assert assign_bin(d, b) == expected


def test_only_small_durations():
    b = fit_binning([0, 0, 5], BinningConfig(t_cut=300))
    assert not b.has_quantile_bins and b.n_bins == 2
    assert assign_bin(4000, b) == 1  # falls back to the nearest individual bin


def test_only_large_durations():
    b = fit_binning([400, 500, 600, 700], BinningConfig(t_cut=300, n_quantile=2))
    assert b.unique_bins == () and b.n_bins == 2
    assert assign_bin(5, b) == 2 - 2  # below every edge


def test_spike_moves_cut_off():
    # many 400s then a spread: the lowest quantile bin dominates until 400 leaves it
    vals = [400] * 20 + list(range(1000, 2000, 100))
    b = fit_binning(vals, BinningConfig(t_cut=300, n_quantile=4))
    assert b.t_cut > 400 or b.balance <= 1.25
    assert 400.0 in b.unique_bins or b.balance <= 1.25


def test_binning_rejects_bad_input():
    with pytest.raises(ValueError):
        fit_binning([])
    with pytest.raises(ValueError):
        fit_binning([-1.0])
    with pytest.raises(ValueError):
        BinningConfig(t_cut=0)


@settings(max_examples=60)
@given(st.lists(st.integers(0, 40).map(lambda k: k * 60), min_size=1, max_size=60),
       st.integers(1, 12), st.sampled_from([60, 300, 900]))
def test_binning_matches_oracle(vals, nq, t_cut):
    cfg = BinningConfig(t_cut=t_cut, n_quantile=nq)
    b = fit_binning(vals, cfg)
    unique, edges, has_large, tc = brute_binning(vals, t_cut, nq, cfg.max_iterations,
                                                 cfg.balance_tolerance)
    assert list(b.unique_bins) == unique
    assert np.allclose(b.quantile_edges, edges, rtol=0, atol=1e-12)
    assert b.has_quantile_bins == has_large and b.t_cut == tc
    for d in set(vals) | {0, 31, 299, 301, 5000}:
        assert assign_bin(d, b) == brute_assign(d, unique, edges, tc, has_large)


def test_round_duration():
    assert round_duration(89, 60) == 60
    assert round_duration(90, 60) == 120
    assert round_duration(17, 1) == 17


def test_hand_tfidf():
    d1 = [("a", 0), ("a", 0), ("b", 1)]
    d2 = [("a", 0)]
    corpus = fit_corpus([d1, d2])
    assert corpus.idf(("a", 0)) == 1.0
    assert corpus.idf(("b", 1)) == pytest.approx(math.log(1.5) + 1)
    assert corpus.idf(("z", 0)) == pytest.approx(math.log(3) + 1)
    m = pseudo_matrix(d1, corpus, 2)
    assert m.tolist() == [[2.0, 0.0], [2.0, 0.0], [0.0, math.log(1.5) + 1]]


def test_corpus_json_round_trip():
    c = fit_corpus([[("a", 0), ("b", 2)], [("a", 0)]])
    assert TfidfCorpus.from_dict(c.to_dict()) == c
    b = fit_binning(HAND, BinningConfig(t_cut=300, n_quantile=2))
    assert DurationBinning.from_dict(b.to_dict()) == b


def test_provider_uses_training_statistics_only():
    ds = synth_imbalanced(80, seed=3)
    train, test = ds.traces[:60], ds.traces[60:]
    prov = PseudoProvider.fit(train)
    assert prov.corpus.n_docs == 60
    again = PseudoProvider.from_json(prov.to_json())
    for t in test:
        m = prov(t)
        assert m.shape == (len(t.events), prov.dim)
        assert np.array_equal(m, again(t))
        assert (m >= 0).all()


def test_provider_on_zero_durations():
    ds = synth_balanced(5, 2, 0)
    prov = PseudoProvider.fit(ds.traces)
    assert prov.dim == 1
    m = prov(ds.traces[0])
    assert m.shape == (len(ds.traces[0].events), 1)


def test_same_activity_rows_identical():
    ev = [EventRecord("c", "x", 0, 60), EventRecord("c", "y", 60, 60),
          EventRecord("c", "x", 100, 700)]
    t = CaseTrace("c", tuple(ev), {}, 0)
    prov = PseudoProvider.fit([t], BinningConfig(t_cut=300, resolution=1))
    m = prov(t)
    assert np.array_equal(m[0], m[2]) and not np.array_equal(m[0], m[1])
