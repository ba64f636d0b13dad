import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imrl.networks import (
    ACTION_NAMES,
    PNetwork,
    QNetwork,
    bce_loss,
    bellman_from_q,
    bellman_targets,
    fuse_and_select,
    get_preset,
    load_checkpoints,
    make_stream,
    normalize_q,
    pnet_forward,
    qnet_stream_forward,
    qnet_train_step,
    save_checkpoints,
)
from imrl.tensorcore import CheckpointError, Conv2D, FullyConnected, OptimizerSpec, ShapeError

from .oracles import bce, central_difference, rel_err

SMALL = get_preset("desk", 20).scaled(0.125)
SGD1 = OptimizerSpec("sgd", 1.0)


def frames(rng, n, preset=SMALL):
    return rng.random((n, *preset.input_shape))


def jitter_biases(layers, rng):
    # zero biases put ReLU inputs exactly on the kink when a feature map is dead
    for layer in layers:
        if "bias" in layer.params:
            layer.params["bias"] += rng.normal(scale=0.05, size=layer.params["bias"].shape)


def sampled_gradcheck(params, analytic, loss, rng, per_tensor=12):
    """Central differences on a random subset of coordinates of every parameter tensor."""
    num, ana = [], []
    for w, g in zip(params, analytic):
        flat, gflat = w.reshape(-1), g.reshape(-1)
        for i in rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False):
            view = flat[i:i + 1]
            num.append(central_difference(loss, view)[0])
            ana.append(gflat[i])
    return rel_err(np.array(ana), np.array(num))


# --- presets -----------------------------------------------------------------------
def test_paper_preset_reaches_5x5_before_fc1():
    shapes = get_preset("paper").feature_shapes()
    assert shapes[0] == (16, 64, 64)
    assert shapes[-3] == (32, 5, 5)


def test_desk_preset_chain():
    assert get_preset("desk").feature_shapes()[-1] == (256,)


def test_unknown_preset():
    with pytest.raises(ValueError):
        get_preset("huge")


def test_resolution_too_small_is_shape_error():
    with pytest.raises(ShapeError):
        get_preset("desk", 12)


# --- Pnet --------------------------------------------------------------------------
def test_pnet_zero_weights_give_half():
    out = pnet_forward(PNetwork(SMALL), np.random.default_rng(0).random(SMALL.input_shape), 2)
    assert out.tolist() == [0.5, 0.5, 0.5]


def test_pnet_is_pure_and_action_path_is_live():
    rng = np.random.default_rng(4)
    net = PNetwork(SMALL, rng)
    x = rng.random(SMALL.input_shape)
    assert np.array_equal(pnet_forward(net, x, 1), pnet_forward(net, x, 1))
    assert not np.array_equal(pnet_forward(net, x, 0), pnet_forward(net, x, 3))


def test_pnet_layout():
    net = PNetwork(get_preset("desk"), np.random.default_rng(0))
    assert net.encoder.layers[0].params["weight"].shape == (4, 256)
    assert net.head.layers[0].params["weight"].shape == (512, 128)
    assert net.head.layers[2].params["weight"].shape == (128, 3)


def test_pnet_shape_error():
    with pytest.raises(ShapeError):
        PNetwork(SMALL).predict(np.zeros((1, 7, 20, 20)), [0])


def test_pnet_outputs_clamped():
    net = PNetwork(SMALL, np.random.default_rng(0))
    net.head.layers[-2].params["bias"][...] = [800.0, -800.0, 0.0]
    p = pnet_forward(net, np.zeros(SMALL.input_shape), 0)
    assert 0.0 < p[1] < p[0] < 1.0


@pytest.mark.parametrize("seed", range(100))
def test_pnet_end_to_end_gradient(seed):
    rng = np.random.default_rng(seed)
    net = PNetwork(SMALL, rng)
    jitter_biases(net.layers, rng)
    x, acts = frames(rng, 2), rng.integers(0, 4, size=2)
    events = rng.integers(0, 2, size=(2, 3)).astype(float)
    before = [w.copy() for layer in net.layers for w in layer.params.values()]
    net.train_step(x, acts, events, SGD1)
    params = [w for layer in net.layers for w in layer.params.values()]
    analytic = [b - w for b, w in zip(before, params)]
    for w, b in zip(params, before):
        w[...] = b

    def loss():
        return float(np.mean([bce(e, p) for e, p in zip(events, net.predict(x, acts))]))

    assert sampled_gradcheck(params, analytic, loss, rng) < 1e-4


# --- BCE ---------------------------------------------------------------------------
def test_bce_uniform_is_ln2():
    loss, _ = bce_loss([1, 0, 1], [0.5, 0.5, 0.5])
    assert abs(loss - math.log(2)) < 1e-9


def test_bce_perfect_prediction():
    loss, _ = bce_loss([1, 1, 1], [1 - 1e-12] * 3)
    assert 0 <= loss < 1e-11


def test_bce_worked_example():
    loss, _ = bce_loss([1, 0, 0], [0.9, 0.1, 0.2])
    assert abs(loss - 0.144622) < 1e-6
    assert abs(loss - bce([1, 0, 0], [0.9, 0.1, 0.2])) < 1e-12


def test_bce_gradient_formula():
    e, p = np.array([1.0, 0.0, 1.0]), np.array([0.3, 0.6, 0.8])
    _, g = bce_loss(e, p)
    num = central_difference(lambda: float(bce_loss(e, p)[0]), p)
    assert rel_err(g, num) < 1e-7


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.integers(0, 1), min_size=3, max_size=3),
    st.lists(st.floats(0.0, 1.0), min_size=3, max_size=3),
)
def test_bce_nonnegative(e, p):
    assert bce_loss(e, p)[0] >= 0.0


# --- Qnet --------------------------------------------------------------------------
def test_zero_weight_stream_outputs_zero():
    q = qnet_stream_forward(make_stream(SMALL), np.random.default_rng(0).random(SMALL.input_shape))
    assert q.tolist() == [[0.0, 0.0, 0.0, 0.0]]


def test_stream_is_pure():
    rng = np.random.default_rng(1)
    s, x = make_stream(SMALL, rng), frames(rng, 2)
    assert np.array_equal(qnet_stream_forward(s, x), qnet_stream_forward(s, x))


def _inf_norm_lipschitz(stream):
    bound = 1.0
    for layer in stream.layers:
        w = layer.params.get("weight")
        if w is None:
            continue
        if isinstance(layer, Conv2D):
            bound *= np.abs(w).reshape(w.shape[0], -1).sum(axis=1).max()
        elif isinstance(layer, FullyConnected):
            bound *= np.abs(w).sum(axis=0).max()
    return bound


def test_stream_lipschitz_probe():
    rng = np.random.default_rng(7)
    s = make_stream(SMALL, rng)
    bound = _inf_norm_lipschitz(s)
    x = frames(rng, 1)[0]
    base = qnet_stream_forward(s, x)
    ratios = []
    for _ in range(100):
        y = x.copy()
        idx = tuple(rng.integers(0, d) for d in y.shape)
        delta = rng.uniform(-0.05, 0.05)
        y[idx] += delta
        change = np.abs(qnet_stream_forward(s, y) - base).max()
        ratios.append(change / abs(delta))
    assert max(ratios) <= bound * (1 + 1e-9)
    assert max(ratios) > 0


def test_qnet_target_shapes_match():
    q = QNetwork(SMALL, np.random.default_rng(0))
    for _, live, target in q.streams:
        assert [w.shape for l in live.layers for w in l.params.values()] == [
            w.shape for l in target.layers for w in l.params.values()
        ]


@pytest.mark.parametrize("seed", range(100))
def test_qnet_stream_end_to_end_gradient(seed):
    rng = np.random.default_rng(seed)
    s = make_stream(SMALL, rng)
    jitter_biases(s.layers, rng)
    x, acts, targets = frames(rng, 2), rng.integers(0, 4, size=2), rng.normal(size=2)
    params = [layer.params[name] for layer, name in s.parameters()]
    before = [w.copy() for w in params]
    qnet_train_step(s, x, acts, targets, SGD1)
    analytic = [b - w for b, w in zip(before, params)]
    for w, b in zip(params, before):
        w[...] = b

    def loss():
        q = qnet_stream_forward(s, x)
        return float(np.mean((targets - q[np.arange(2), acts]) ** 2))

    assert sampled_gradcheck(params, analytic, loss, rng) < 1e-4


def test_train_step_at_target_is_noop():
    rng = np.random.default_rng(2)
    s, x, acts = make_stream(SMALL, rng), frames(rng, 3), np.array([0, 2, 3])
    targets = qnet_stream_forward(s, x)[np.arange(3), acts]
    before = [layer.params[n].copy() for layer, n in s.parameters()]
    assert qnet_train_step(s, x, acts, targets, OptimizerSpec("rmsprop", 0.1)) == 0.0
    assert all(np.array_equal(b, layer.params[n]) for b, (layer, n) in zip(before, s.parameters()))


def test_single_sample_output_gradient():
    s = make_stream(SMALL)  # zero weights: q = 0
    x = np.random.default_rng(0).random(SMALL.input_shape)
    loss = qnet_train_step(s, x, [2], [1.0], SGD1)
    assert loss == 1.0
    # with zero weights only the last bias sees the gradient: -2 at the taken action
    assert s.layers[-1].params["bias"].tolist() == [0.0, 0.0, 2.0, 0.0]


@pytest.mark.parametrize("seed", range(20))
def test_small_step_decreases_loss(seed):
    rng = np.random.default_rng(seed)
    s, x, acts, targets = make_stream(SMALL, rng), frames(rng, 4), rng.integers(0, 4, 4), rng.normal(size=4)
    before = qnet_train_step(s, x, acts, targets, OptimizerSpec("sgd", 1e-6))
    q = qnet_stream_forward(s, x)[np.arange(4), acts]
    assert np.mean((targets - q) ** 2) < before


# --- fusion ------------------------------------------------------------------------
@pytest.mark.parametrize(
    "qg,qd,expected",
    [((0, 1, 2, 3), (3, 2, 1, 0), 0), ((2, 2, 2, 2), (0, 0, 0, 10), 3), ((0, 4, 2, 1), (0, 4, 2, 1), 1)],
)
def test_fusion_examples(qg, qd, expected):
    assert ACTION_NAMES[fuse_and_select(qg, qd)] == ACTION_NAMES[expected]


def test_constant_stream_normalizes_to_half():
    assert normalize_q([2.0, 2.0, 2.0, 2.0]).tolist() == [0.5] * 4


q_ints = st.lists(st.integers(-50, 50), min_size=4, max_size=4)


@settings(max_examples=300, deadline=None)
@given(q_ints, q_ints, st.integers(1, 40), st.integers(-100, 100))
def test_fusion_affine_invariance(qg, qd, a, b):
    qg2 = [a * v + b for v in qg]
    assert fuse_and_select(np.array(qg, float), np.array(qd, float)) == fuse_and_select(np.array(qg2, float), np.array(qd, float))


@settings(max_examples=300, deadline=None)
@given(q_ints)
def test_identical_streams_give_single_argmax(q):
    q = np.array(q, float)
    assert fuse_and_select(q, q) == int(np.argmax(q))


# --- Bellman -----------------------------------------------------------------------
def test_bellman_worked_examples():
    out = bellman_from_q([1.0, 0.0, -0.1], [7.0, 0.5, 1.0], [True, False, False], 0.9)
    np.testing.assert_allclose(out, [1.0, 0.45, 0.8], atol=1e-9)


def test_bellman_uses_target_stream():
    rng = np.random.default_rng(3)
    q = QNetwork(SMALL, rng)
    x = frames(rng, 3)
    r, term = np.array([0.1, -0.2, 0.3]), np.array([False, True, False])
    via_target = bellman_targets(r, x, term, q.gray_target, 0.9)
    via_live = bellman_targets(r, x, term, q.gray, 0.9)
    assert np.array_equal(via_target, via_live)  # synced at construction
    qmax = qnet_stream_forward(q.gray_target, x).max(axis=1)
    np.testing.assert_allclose(via_target, np.where(term, r, r + 0.9 * qmax), rtol=0, atol=0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1, 1).filter(lambda v: abs(v) > 1e-6), min_size=1, max_size=8))
def test_bellman_gamma_to_zero(rewards):
    q = np.full(len(rewards), 3.0)
    out = bellman_from_q(rewards, q, [False] * len(rewards), 1e-300)
    assert out.tolist() == rewards


def test_bellman_gamma_range():
    with pytest.raises(ValueError):
        bellman_targets([0.0], np.zeros((1, *SMALL.input_shape)), [False], make_stream(SMALL), 0.0)


# --- sync --------------------------------------------------------------------------
def _weights(stack):
    return [layer.params[n].copy() for layer, n in stack.parameters()]


def test_sync_then_training_leaves_target_frozen():
    rng = np.random.default_rng(5)
    q = QNetwork(SMALL, rng)
    frozen = _weights(q.gray_target)
    qnet_train_step(q.gray, frames(rng, 2), [0, 1], [1.0, -1.0], OptimizerSpec("rmsprop", 0.01))
    assert all(np.array_equal(a, b) for a, b in zip(frozen, _weights(q.gray_target)))
    assert not all(np.array_equal(a, b) for a, b in zip(_weights(q.gray), _weights(q.gray_target)))
    q.sync_target()
    once = _weights(q.gray_target)
    q.sync_target()
    assert all(np.array_equal(a, b) for a, b in zip(once, _weights(q.gray_target)))
    assert all(np.array_equal(a, b) for a, b in zip(_weights(q.gray), once))


# --- checkpoints -------------------------------------------------------------------
def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    p, q = PNetwork(SMALL, rng), QNetwork(SMALL, rng)
    p.train_step(frames(rng, 2), [0, 1], [[1, 0, 1], [0, 0, 1]], OptimizerSpec("sgd", 0.1))
    qnet_train_step(q.depth, frames(rng, 2), [0, 3], [1.0, 0.0], OptimizerSpec("rmsprop", 0.01))
    save_checkpoints(tmp_path, p, q)
    p2, q2 = load_checkpoints(tmp_path, SMALL)
    x = frames(rng, 3)
    assert np.array_equal(p.predict(x, [0, 1, 2]), p2.predict(x, [0, 1, 2]))
    for a, b in zip(q.q_values(x, x), q2.q_values(x, x)):
        assert np.array_equal(a, b)
    assert all(np.array_equal(a, b) for a, b in zip(_weights(q.depth_target), _weights(q2.depth_target)))


def test_corrupt_checkpoint(tmp_path):
    rng = np.random.default_rng(0)
    save_checkpoints(tmp_path, PNetwork(SMALL, rng), QNetwork(SMALL, rng))
    data = (tmp_path / "qnet-gray.ckpt").read_bytes()
    (tmp_path / "qnet-gray.ckpt").write_bytes(data[: len(data) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoints(tmp_path, SMALL)


def test_custom_preset_needs_explicit_preset(tmp_path):
    rng = np.random.default_rng(0)
    save_checkpoints(tmp_path, PNetwork(SMALL, rng), QNetwork(SMALL, rng))
    with pytest.raises(CheckpointError, match="preset"):
        load_checkpoints(tmp_path)
    with pytest.raises(CheckpointError):
        load_checkpoints(tmp_path, get_preset("desk", 20))
