import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imrl.tensorcore import (
    CheckpointError,
    Conv2D,
    FullyConnected,
    LayerStateError,
    MaxPool2x2,
    OptimizerSpec,
    ReLU,
    ShapeError,
    Sigmoid,
    Stack,
    dumps_layers,
    optimizer_step,
    output_shape,
    read_layers_into,
)

from .oracles import central_difference, conv_out, naive_conv, naive_maxpool, rel_err, rmsprop_scalar

SEEDS = range(100)


def built(layer, shape, seed=0):
    layer.build(shape, np.random.default_rng(seed))
    return layer


def away_from_kinks(rng, shape, gap=1e-3):
    x = rng.normal(size=shape)
    x[np.abs(x) < gap] += 3 * gap
    return x


def check_layer_gradients(layer, x, rng):
    out = layer.forward(x)
    r = rng.normal(size=out.shape)
    analytic_x = layer.backward(r)
    analytic_w = {k: g.copy() for k, g in layer.grads.items()}

    def loss():
        val = float((layer.forward(x) * r).sum())
        layer._cache = None
        return val

    assert rel_err(analytic_x, central_difference(loss, x)) < 1e-4
    for name, w in layer.params.items():
        assert rel_err(analytic_w[name], central_difference(loss, w)) < 1e-4


# --- output_shape ------------------------------------------------------------------
def test_conv_shape_desk():
    assert output_shape(Conv2D(4, 5, 2), (1, 32, 32))[1:] == (14, 14)


def test_conv_shape_paper_preset():
    assert output_shape(Conv2D(16, 9, 3), (8, 198, 198))[1:] == (64, 64)


def test_pool_shape_odd():
    assert output_shape(MaxPool2x2(), (3, 15, 15)) == (3, 7, 7)


def test_identity_shapes():
    assert output_shape(ReLU(), (2, 5, 5)) == (2, 5, 5)
    assert output_shape(Sigmoid(), (7,)) == (7,)


def test_conv_too_small_names_axis():
    with pytest.raises(ShapeError, match="width"):
        output_shape(Conv2D(1, (3, 5), 1), (1, 8, 4))


@settings(max_examples=60, deadline=None)
@given(
    c=st.integers(1, 3), h=st.integers(3, 12), w=st.integers(3, 12),
    k=st.integers(1, 3), s=st.integers(1, 3), f=st.integers(1, 3),
)
def test_forward_matches_output_shape(c, h, w, k, s, f):
    rng = np.random.default_rng(0)
    stack = Stack([Conv2D(f, k, s), ReLU(), FullyConnected(2), Sigmoid()], (c, h, w), rng)
    conv = stack.layers[0]
    y = conv.forward(rng.normal(size=(2, c, h, w)))
    assert y.shape[1:] == (f, conv_out(h, k, s), conv_out(w, k, s))
    assert stack.forward(rng.normal(size=(2, c, h, w))).shape == (2, 2)
    if h >= 2 and w >= 2:
        assert MaxPool2x2().forward(rng.normal(size=(1, c, h, w))).shape[1:] == output_shape(MaxPool2x2(), (c, h, w))


# --- forward -----------------------------------------------------------------------
def test_relu_forward():
    assert ReLU().forward(np.array([[-1.0, 0.0, 2.0]])).tolist() == [[0.0, 0.0, 2.0]]


def test_sigmoid_forward_symmetry_point():
    assert Sigmoid().forward(np.array([[0.0]]))[0, 0] == 0.5


def test_sigmoid_extremes_are_finite():
    y = Sigmoid().forward(np.array([[-800.0, 800.0]]))
    assert np.all(np.isfinite(y)) and y[0, 0] == 0.0 and y[0, 1] == 1.0


def test_zero_weight_conv_outputs_zero():
    conv = Conv2D(3, 3, 1)
    conv.build((2, 6, 6), None)
    assert not conv.forward(np.random.default_rng(1).normal(size=(2, 2, 6, 6))).any()


@pytest.mark.parametrize("seed", range(10))
def test_conv_forward_matches_loops(seed):
    rng = np.random.default_rng(seed)
    conv = built(Conv2D(3, (3, 2), 2), (2, 9, 8), seed)
    conv.params["bias"][...] = rng.normal(size=3)
    x = rng.normal(size=(2, 2, 9, 8))
    np.testing.assert_allclose(conv.forward(x), naive_conv(x, conv.params["weight"], conv.params["bias"], 2), atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_maxpool_forward_matches_loops(seed):
    x = np.random.default_rng(seed).normal(size=(2, 3, 7, 6))
    np.testing.assert_array_equal(MaxPool2x2().forward(x), naive_maxpool(x))


def test_forward_is_pure():
    rng = np.random.default_rng(3)
    stack = Stack([Conv2D(2, 3, 1), ReLU(), MaxPool2x2(), FullyConnected(4)], (1, 8, 8), rng)
    x = rng.normal(size=(3, 1, 8, 8))
    assert np.array_equal(stack.forward(x), stack.forward(x))


def test_shape_mismatch_is_reported():
    stack = Stack([FullyConnected(2)], (4,), np.random.default_rng(0))
    with pytest.raises(ShapeError, match=r"\(4,\)"):
        stack.forward(np.zeros((1, 5)))


# --- backward ----------------------------------------------------------------------
def test_relu_backward_gates_by_sign():
    relu = ReLU()
    relu.forward(np.array([[-1.0, 2.0]]))
    assert relu.backward(np.array([[5.0, 5.0]])).tolist() == [[0.0, 5.0]]


def test_backward_without_forward():
    for layer in (ReLU(), Sigmoid(), MaxPool2x2(), built(FullyConnected(2), (3,)), built(Conv2D(1, 2), (1, 3, 3))):
        with pytest.raises(LayerStateError):
            layer.backward(np.zeros((1, 1)))


@pytest.mark.parametrize(
    "layer,shape",
    [(Conv2D(2, 3, 2), (2, 7, 7)), (FullyConnected(3), (2, 2, 2)), (MaxPool2x2(), (2, 4, 5)), (ReLU(), (5,)), (Sigmoid(), (5,))],
)
def test_zero_upstream_gives_zero_grads(layer, shape):
    built(layer, shape)
    x = np.random.default_rng(0).normal(size=(2, *shape))
    out = layer.forward(x)
    dx = layer.backward(np.zeros_like(out))
    assert dx.shape == x.shape and not dx.any()
    assert all(not g.any() for g in layer.grads.values())


def test_conv_single_filter_gradient_worked_example():
    rng = np.random.default_rng(42)
    conv = built(Conv2D(1, 3, 1), (1, 6, 6), 42)
    check_layer_gradients(conv, rng.normal(size=(1, 1, 6, 6)), rng)


def test_maxpool_tie_routes_to_first_index():
    pool = MaxPool2x2()
    pool.forward(np.ones((1, 1, 2, 2)))
    assert pool.backward(np.array([[[[1.0]]]]))[0, 0].tolist() == [[1.0, 0.0], [0.0, 0.0]]


def test_backward_accumulates():
    rng = np.random.default_rng(5)
    fc = built(FullyConnected(2), (3,), 5)
    x, r = rng.normal(size=(4, 3)), rng.normal(size=(4, 2))
    fc.forward(x); fc.backward(r)
    once = fc.grads["weight"].copy()
    fc.forward(x); fc.backward(r)
    np.testing.assert_allclose(fc.grads["weight"], 2 * once)


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_conv(seed):
    rng = np.random.default_rng(seed)
    k, s = int(rng.integers(1, 4)), int(rng.integers(1, 3))
    conv = built(Conv2D(int(rng.integers(1, 3)), k, s), (2, 6, 7), seed)
    conv.params["bias"][...] = rng.normal(size=conv.filters)
    check_layer_gradients(conv, rng.normal(size=(2, 2, 6, 7)), rng)


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_fullyconnected(seed):
    rng = np.random.default_rng(seed)
    fc = built(FullyConnected(int(rng.integers(1, 5))), (2, 3), seed)
    check_layer_gradients(fc, rng.normal(size=(3, 2, 3)), rng)


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_maxpool(seed):
    rng = np.random.default_rng(seed)
    # distinct values keep every window's argmax stable under the h=1e-5 perturbation
    x = rng.permutation(2 * 2 * 5 * 4).reshape(2, 2, 5, 4) * 0.01 + rng.uniform(0, 1e-3)
    check_layer_gradients(MaxPool2x2(), x, rng)


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_relu(seed):
    rng = np.random.default_rng(seed)
    check_layer_gradients(ReLU(), away_from_kinks(rng, (3, 6)), rng)


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_sigmoid(seed):
    rng = np.random.default_rng(seed)
    check_layer_gradients(Sigmoid(), 3 * rng.normal(size=(3, 6)), rng)


# --- optimizers --------------------------------------------------------------------
def single_weight(w, g):
    fc = built(FullyConnected(1), (1,))
    fc.params["weight"][...] = w
    fc.grads["weight"][...] = g
    return fc


def test_sgd_worked_example():
    fc = single_weight(1.0, 2.0)
    optimizer_step(fc, OptimizerSpec("sgd", 0.00025))
    assert fc.params["weight"][0, 0] == pytest.approx(0.9995, abs=1e-15)
    assert not fc.grads["weight"].any()


def test_rmsprop_worked_example():
    fc = single_weight(0.0, 1.0)
    optimizer_step(fc, OptimizerSpec("rmsprop", 0.00025, 0.95, 1e-6))
    assert fc.accumulators["weight"][0, 0] == pytest.approx(0.05, abs=1e-15)
    assert -fc.params["weight"][0, 0] == pytest.approx(0.0011180, abs=1e-7)
    assert -fc.params["weight"][0, 0] == pytest.approx(0.00025 / math.sqrt(0.050001), rel=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_rmsprop_matches_scalar_recurrence(seed):
    rng = np.random.default_rng(seed)
    fc = single_weight(0.3, 0.0)
    w, acc = 0.3, 0.0
    spec = OptimizerSpec("rmsprop", 0.01, 0.9, 1e-6)
    for _ in range(5):
        g = float(rng.normal())
        fc.grads["weight"][...] = g
        optimizer_step(fc, spec)
        w, acc = rmsprop_scalar(w, g, acc, 0.01, 0.9, 1e-6)
    assert fc.params["weight"][0, 0] == pytest.approx(w, rel=1e-12)


@pytest.mark.parametrize("kind", ["sgd", "rmsprop"])
def test_zero_gradient_is_identity(kind):
    fc = built(FullyConnected(3), (4,), 9)
    before = fc.params["weight"].copy()
    optimizer_step(fc, OptimizerSpec(kind, 0.1))
    assert np.array_equal(fc.params["weight"], before)


def test_optimizer_on_weightless_layer_is_noop():
    optimizer_step(ReLU(), OptimizerSpec("rmsprop"))


@pytest.mark.parametrize("kwargs", [{"learning_rate": 0.0}, {"kind": "adam"}, {"rmsprop_decay": 1.0}, {"rmsprop_epsilon": 0}])
def test_optimizer_spec_validation(kwargs):
    with pytest.raises(ValueError):
        OptimizerSpec(**kwargs)


# --- checkpoints -------------------------------------------------------------------
def small_stack(seed):
    return Stack([Conv2D(2, 3, 1), ReLU(), MaxPool2x2(), FullyConnected(3), Sigmoid()], (1, 6, 6), np.random.default_rng(seed))


def test_checkpoint_round_trip_bit_exact():
    a, b = small_stack(1), small_stack(2)
    for layer in a.layers:
        for acc in layer.accumulators.values():
            acc[...] = np.random.default_rng(3).random(acc.shape)
    data = dumps_layers(a.layers)
    assert data.startswith(b"IMRL-NET v1\n")
    buf = io.BytesIO(data)
    buf.readline()
    read_layers_into(buf, b.layers)
    for la, lb in zip(a.layers, b.layers):
        for name in la.params:
            assert la.params[name].tobytes() == lb.params[name].tobytes()
            assert la.accumulators[name].tobytes() == lb.accumulators[name].tobytes()
    assert dumps_layers(b.layers) == data


@pytest.mark.parametrize("cut", [20, 200, -8])
def test_truncated_checkpoint_rejected(cut):
    data = dumps_layers(small_stack(1).layers)
    buf = io.BytesIO(data[:cut])
    buf.readline()
    with pytest.raises(CheckpointError):
        read_layers_into(buf, small_stack(2).layers)


def test_checkpoint_structure_mismatch_rejected():
    other = Stack([Conv2D(3, 3, 1), ReLU(), MaxPool2x2(), FullyConnected(3), Sigmoid()], (1, 6, 6), np.random.default_rng(0))
    buf = io.BytesIO(dumps_layers(small_stack(1).layers))
    buf.readline()
    with pytest.raises(CheckpointError):
        read_layers_into(buf, other.layers)
