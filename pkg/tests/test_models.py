import json

import numpy as np
import pytest

from eventgraph.eventlog import synth_balanced, synth_imbalanced
from eventgraph.graphrep import make_batch
from eventgraph.models import (HyperParams, InputDims, LayerSpec, Model, apply_input_mask,
                               load_checkpoint, save_checkpoint)
from eventgraph.pipeline import prepare

from helpers import ALL_MODELS, small_hp


@pytest.fixture(scope="module")
def prepared():
    return prepare(synth_imbalanced(200, seed=2), 0.8, 0)


@pytest.mark.parametrize("arch, conv", ALL_MODELS)
def test_forward_shapes(prepared, arch, conv):
    hp = small_hp(arch, conv, batch_norm=True, dropout=0.2)
    model = Model(hp, prepared.dims, 6, seed=1)
    batch = make_batch(prepared.val_graphs)
    out = model(batch, training=True, rng=np.random.default_rng(0))
    assert out.shape == (batch.num_graphs, 6)
    ev = model(batch)
    assert np.isfinite(ev.data).all()


@pytest.mark.parametrize("arch, conv", ALL_MODELS)
def test_same_seed_same_model(prepared, arch, conv):
    hp = small_hp(arch, conv)
    a = Model(hp, prepared.dims, 3, seed=4).state_dict()
    b = Model(hp, prepared.dims, 3, seed=4).state_dict()
    c = Model(hp, prepared.dims, 3, seed=5).state_dict()
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_eval_is_batch_independent(prepared):
    model = Model(small_hp("T", "gcnconv", batch_norm=True), prepared.dims, 6, seed=0)
    graphs = prepared.val_graphs
    whole = model(make_batch(graphs)).data
    parts = np.vstack([model(make_batch([g])).data for g in graphs])
    assert np.allclose(whole, parts, atol=1e-12)


def test_masked_inputs_are_zeroed():
    feats = np.array([[0.5, -1.0], [1.0, 0.0]])
    mask = np.array([[True, False], [True, True]])
    assert apply_input_mask(feats, mask).tolist() == [[0.5, 0.0], [1.0, 0.0]]


def test_structure_checks():
    base = small_hp("T", "gcnconv")
    with pytest.raises(ValueError):
        HyperParams(**{**base.__dict__, "arch": "X"}).check_structure()
    with pytest.raises(ValueError):
        HyperParams(**{**base.__dict__, "graph_layers": []}).check_structure()
    with pytest.raises(ValueError):
        HyperParams(**{**base.__dict__, "pseudo_layers": [LayerSpec(4)]}).check_structure()
    with pytest.raises(ValueError):
        small_hp("T", "graphconv", aggr=None).check_structure()
    bad = small_hp("T", "gcnconv")
    bad.node_layers[0].aggr = "add"
    with pytest.raises(ValueError):
        bad.check_structure()


def test_tp_needs_pseudo_dims():
    with pytest.raises(ValueError):
        Model(small_hp("TP", "gcnconv"), InputDims(10, 2, None, 5, 4), 2)


def test_te_splits_activity_columns(prepared):
    dims = prepared.dims
    model = Model(small_hp("TE", "gcnconv"), dims, 6)
    assert model.stacks["node"].blocks[0].d_in == dims.node - dims.activity_width
    assert model.embedding.table.shape == (dims.n_activities, 4)


def test_o_repeats_graph_vector(prepared):
    model = Model(small_hp("O", "gcnconv"), prepared.dims, 6)
    assert model.stacks["node"].blocks[0].d_in == prepared.dims.node + prepared.dims.graph
    assert "graph" not in model.stacks


def test_balanced_has_no_graph_stack_needed():
    p = prepare(synth_balanced(10, 2, 0), 0.8, 0)
    assert p.provider is None
    model = Model(small_hp("T", "graphconv"), p.dims, 2)
    assert model(make_batch(p.val_graphs)).shape == (len(p.val_graphs), 2)


def test_weight_matrices_skip_bias_and_affine(prepared):
    model = Model(small_hp("TP", "graphconv", batch_norm=True), prepared.dims, 6)
    names = set(model.parameters())
    kept = {id(t) for t in model.weight_matrices()}
    for name, t in model.parameters().items():
        excluded = name.endswith((".bias", ".gamma", ".beta"))
        assert (id(t) in kept) != excluded, name
    assert any(n.endswith(".weight_neigh") for n in names)


def test_hp_dict_round_trip():
    for arch, conv in ALL_MODELS:
        hp = small_hp(arch, conv, batch_norm=True, dropout=0.1)
        again = HyperParams.from_dict(json.loads(json.dumps(hp.to_dict())))
        assert again == hp


@pytest.mark.parametrize("arch, conv", ALL_MODELS)
def test_checkpoint_round_trip(prepared, arch, conv, tmp_path):
    hp = small_hp(arch, conv, batch_norm=True)
    model = Model(hp, prepared.dims, 6, seed=3)
    batch = make_batch(prepared.train_graphs)
    model(batch, training=True, rng=np.random.default_rng(0))  # move running stats
    path = tmp_path / "m.json"
    save_checkpoint(path, model, list("abcdef"), {"seed": 3})
    back, doc = load_checkpoint(path)
    assert doc["refs"] == {"seed": 3}
    vb = make_batch(prepared.val_graphs)
    assert np.array_equal(model(vb).data, back(vb).data)


def test_load_state_shape_mismatch(prepared):
    model = Model(small_hp("T", "gcnconv"), prepared.dims, 6)
    state = model.state_dict()
    key = next(iter(state))
    state[key] = np.zeros((1, 1))
    with pytest.raises(ValueError):
        model.load_state_dict(state)
