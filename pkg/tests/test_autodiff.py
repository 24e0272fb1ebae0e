import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

import eventgraph.autodiff as ad
from eventgraph.autodiff import NumericError, ShapeError, Tape, Tensor

from oracles import grad_check


def param(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def test_no_recording_outside_tape():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = (x * x).sum()
    assert not y.requires_grad
    with Tape() as tape:
        z = (x * 3.0).sum()
    assert len(tape) == 2 and z.requires_grad


def test_gradient_accumulates_over_reuse():
    x = Tensor([2.0], requires_grad=True)
    with Tape() as tape:
        y = (x * x + x).sum()
        tape.backward(y)
    assert x.grad.tolist() == [5.0]


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
        with pytest.raises(ShapeError):
            tape.backward(y)


def test_nonfinite_raises():
    with pytest.raises(NumericError):
        ad.log(Tensor([-1.0]))
    with pytest.raises(NumericError):
        ad.exp(Tensor([1000.0]))


def test_broadcast_mismatch():
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))


UNARY = {
    "relu": ad.relu, "leaky_relu": ad.leaky_relu, "elu": ad.elu, "tanh": ad.tanh,
    "softplus": ad.softplus, "gelu": ad.gelu, "exp": ad.exp, "softmax": ad.softmax_rows,
    "log_softmax": ad.log_softmax_rows,
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name):
    rng = np.random.default_rng(1)
    x = param(rng, 4, 3)
    # keep relu-like kinks away from the probe points
    x.data += np.sign(x.data) * 0.05
    c = rng.standard_normal((4, 3))
    assert grad_check(lambda: (UNARY[name](x) * c).sum(), [x], rng) < 1e-6


def test_binary_and_matmul_gradients():
    rng = np.random.default_rng(2)
    a, b, w = param(rng, 3, 4), param(rng, 1, 4), param(rng, 4, 2)
    b.data = np.abs(b.data) + 0.5

    def f():
        return (((a - b) * a / b) @ w).mean() + (a + 1.0).sum(axis=0).sum()

    assert grad_check(f, [a, b, w], rng) < 1e-6


def test_log_abs_gradients():
    rng = np.random.default_rng(3)
    x = param(rng, 5)
    x.data = np.abs(x.data) + 0.2
    assert grad_check(lambda: (ad.log(x) + ad.tabs(-x)).sum(), [x], rng) < 1e-6


def test_sparse_gather_pick_concat():
    rng = np.random.default_rng(4)
    x, y = param(rng, 5, 3), param(rng, 5, 2)
    m = sp.random(4, 5, density=0.5, random_state=0, format="csr")
    idx = np.array([0, 4, 4, 1])

    def f():
        cat = ad.concat_cols(x, y)
        return ad.spmm(m, cat).sum() \
            + ad.row_gather(cat, idx).sum() * 0.5 \
            + ad.pick(cat, np.arange(5), np.array([0, 1, 2, 3, 4])).sum()

    assert grad_check(f, [x, y], rng) < 1e-6


@pytest.mark.parametrize("mode", ["sum", "mean", "max"])
def test_segment_reduce_gradient(mode):
    rng = np.random.default_rng(5)
    x = param(rng, 7, 3)
    ids = np.array([0, 0, 1, 2, 2, 2, 1])
    c = rng.standard_normal((3, 3))
    assert grad_check(lambda: (ad.segment_reduce(x, ids, 3, mode) * c).sum(), [x], rng) < 1e-6


@settings(max_examples=50)
@given(hnp.arrays(np.float64, (6, 2), elements=st.floats(-5, 5)),
       st.lists(st.integers(0, 3), min_size=6, max_size=6))
def test_segment_reduce_values(x, ids):
    ids = np.array(ids)
    for mode, fn in (("sum", np.sum), ("mean", np.mean), ("max", np.max)):
        out = ad.segment_reduce(x, ids, 4, mode).data
        for s in range(4):
            rows = x[ids == s]
            expected = fn(rows, axis=0) if len(rows) else np.zeros(2)
            assert np.allclose(out[s], expected)


def test_segment_max_tie_goes_to_first_row():
    x = Tensor(np.array([[1.0], [1.0]]), requires_grad=True)
    with Tape() as tape:
        tape.backward(ad.segment_reduce(x, np.array([0, 0]), 1, "max").sum())
    assert x.grad.ravel().tolist() == [1.0, 0.0]


def test_batch_norm_train_gradient_and_stats():
    rng = np.random.default_rng(6)
    x, g, b = param(rng, 8, 3), param(rng, 3), param(rng, 3)
    c = rng.standard_normal((8, 3))
    assert grad_check(lambda: (ad.batch_norm_train(x, g, b, 1e-5)[0] * c).sum(),
                      [x, g, b], rng) < 1e-5
    out, mu, var = ad.batch_norm_train(x.data, np.ones(3), np.zeros(3), 0.0)
    assert np.allclose(out.data.mean(axis=0), 0) and np.allclose(out.data.std(axis=0), 1)
    assert np.allclose(var, x.data.var(axis=0))


def test_softmax_rows_sum_to_one():
    x = np.random.default_rng(0).standard_normal((5, 4)) * 50
    assert np.allclose(ad.softmax_rows(x).data.sum(axis=1), 1)
    assert np.allclose(np.exp(ad.log_softmax_rows(x).data).sum(axis=1), 1)


def test_activations_registry():
    for name, fn in ad.ACTIVATIONS.items():
        out = fn(Tensor(np.linspace(-2, 2, 5)))
        assert out.shape == (5,), name
