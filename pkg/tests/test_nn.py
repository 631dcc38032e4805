import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fogguard.nn import (
    Adam,
    DenseLayer,
    LossSpec,
    MLP,
    OptimizerSpec,
    ShapeError,
    batch_loss_and_grad,
    dense_backward,
    dense_forward,
    grad_check,
    he_uniform,
    load_weights,
    loss_and_grad,
    numeric_gradient,
    save_weights,
    softmax,
)


def test_identity_layer_passes_input_through():
    layer = DenseLayer(np.eye(2), np.zeros(2), "identity")
    np.testing.assert_array_equal(dense_forward(layer, np.array([3.0, 4.0])), [3.0, 4.0])


def test_relu_clamps_negative_preactivation():
    layer = DenseLayer(np.array([[1.0, 1.0]]), np.array([-5.0]), "relu")
    np.testing.assert_array_equal(dense_forward(layer, np.array([2.0, 2.0])), [0.0])


def test_dense_forward_matches_hand_rolled_dot_products():
    rng = np.random.default_rng(3)
    w, b, x = rng.standard_normal((3, 5)), rng.standard_normal(3), rng.standard_normal(5)
    expected = [sum(w[r, c] * x[c] for c in range(5)) + b[r] for r in range(3)]
    got = dense_forward(DenseLayer(w, b, "identity"), x)
    assert np.max(np.abs(got - expected)) < 1e-12


def test_dense_forward_rejects_wrong_input_length():
    layer = DenseLayer(np.zeros((3, 5)), np.zeros(3), "relu")
    with pytest.raises(ShapeError):
        dense_forward(layer, np.zeros(4))


def test_layer_validation():
    with pytest.raises(ValueError):
        DenseLayer(np.zeros((2, 2)), np.zeros(3), "relu")
    with pytest.raises(ValueError):
        DenseLayer(np.zeros((2, 2)), np.zeros(2), "tanh")


def test_softmax_is_shift_invariant_and_stable():
    z = np.array([1000.0, 1001.0, 1002.0])
    p = softmax(z)
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p, softmax(z - 1000.0))
    assert p.sum() == pytest.approx(1.0)


@pytest.mark.parametrize("k", [2, 3, 12])
def test_uniform_logits_give_log_k(k):
    for label in range(k):
        loss, _ = loss_and_grad(LossSpec(), np.zeros(k), label)
        assert loss == pytest.approx(math.log(k), abs=1e-12)


def test_confident_correct_logits_give_near_zero_loss():
    loss, grad = loss_and_grad(LossSpec(), np.array([50.0, 0.0, 0.0]), 0)
    assert loss < 1e-20
    assert np.abs(grad).max() < 1e-20


def test_weighted_loss_scales_by_true_class_weight():
    logits = np.array([0.3, -1.2, 2.0])
    plain, gplain = loss_and_grad(LossSpec(), logits, 1)
    weighted, gw = loss_and_grad(LossSpec("weighted_cross_entropy", np.array([1.0, 2.0, 1.0])), logits, 1)
    assert weighted == pytest.approx(2.0 * plain, rel=1e-14)
    np.testing.assert_allclose(gw, 2.0 * gplain, rtol=1e-14)


def test_label_out_of_range():
    with pytest.raises(IndexError):
        loss_and_grad(LossSpec(), np.zeros(3), 3)
    with pytest.raises(IndexError):
        batch_loss_and_grad(LossSpec(), np.zeros((2, 3)), np.array([0, -1]))


def test_loss_spec_validation():
    with pytest.raises(ValueError):
        LossSpec("weighted_cross_entropy")
    with pytest.raises(ValueError):
        LossSpec("cross_entropy", np.ones(3))
    with pytest.raises(ValueError):
        LossSpec("weighted_cross_entropy", np.array([1.0, 0.0]))
    with pytest.raises(ValueError):
        LossSpec("hinge")


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((4, 5))
    labels = np.array([0, 3, 4, 1])
    spec = LossSpec("weighted_cross_entropy", rng.uniform(0.5, 2.0, size=5))
    _, g = batch_loss_and_grad(spec, logits, labels)
    num = numeric_gradient(lambda: batch_loss_and_grad(spec, logits, labels)[0], logits)
    np.testing.assert_allclose(g, num, atol=1e-9)


def test_adam_zero_gradient_leaves_parameters():
    p = np.array([1.0, -2.0])
    opt = Adam(OptimizerSpec(learning_rate=0.1))
    for _ in range(5):
        opt.step([p], [np.zeros(2)])
    np.testing.assert_array_equal(p, [1.0, -2.0])


def test_adam_hand_trace_three_steps():
    spec = OptimizerSpec(learning_rate=0.001)
    p = np.array([0.5])
    grads = [0.2, -0.1, 0.4]
    # independent trace of the bias-corrected update
    theta, m, v = 0.5, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mhat = m / (1 - 0.9**t)
        vhat = v / (1 - 0.999**t)
        theta -= 0.001 * mhat / (math.sqrt(vhat) + 1e-7)
    opt = Adam(spec)
    for g in grads:
        opt.step([p], [np.array([g])])
    assert abs(p[0] - theta) < 1e-12


def test_adam_constant_gradient_step_approaches_learning_rate():
    lr = 0.01
    p = np.array([0.0, 0.0])
    opt = Adam(OptimizerSpec(learning_rate=lr))
    steps = []
    for _ in range(200):
        before = p.copy()
        opt.step([p], [np.array([3.0, -0.5])])
        steps.append(np.abs(p - before))
    np.testing.assert_allclose(steps[-1], lr, rtol=1e-4)


def test_adam_shape_mismatch():
    opt = Adam()
    with pytest.raises(ShapeError):
        opt.step([np.zeros(2)], [np.zeros(3)])
    with pytest.raises(ShapeError):
        opt.step([np.zeros(2)], [])


def test_optimizer_spec_validation():
    for bad in (dict(learning_rate=0), dict(beta1=1.0), dict(batch_size=0), dict(kind="sgd")):
        with pytest.raises(ValueError):
            OptimizerSpec(**bad)


def test_small_net_gradient_check():
    rng = np.random.default_rng(0)
    # 2 -> 1 -> 2: the smallest two-layer net with a non-trivial softmax head
    net = MLP([
        DenseLayer(rng.standard_normal((1, 2)), np.array([0.5]), "relu"),
        DenseLayer(rng.standard_normal((2, 1)), rng.standard_normal(2), "identity"),
    ])
    assert grad_check(net, rng.standard_normal((3, 2)), np.array([0, 1, 1])) < 1e-4


def test_identity_network_gradient_is_exact():
    net = MLP([DenseLayer(np.eye(3), np.zeros(3), "identity")])
    x = np.array([[0.2, -0.4, 1.0]])
    _, (gw, gb) = net.loss_and_grads(x, np.array([2]))
    num = numeric_gradient(lambda: net.loss(x, np.array([2])), net.layers[0].weights)
    np.testing.assert_allclose(gw, num, atol=1e-10)


def test_relu_backward_masks_inactive_units():
    layer = DenseLayer(np.array([[1.0], [-1.0]]), np.zeros(2), "relu")
    x = np.array([[2.0]])
    out = dense_forward(layer, x)
    gin, gw, gb = dense_backward(layer, x, out, np.array([[1.0, 1.0]]))
    np.testing.assert_array_equal(gb, [[1.0, 0.0]][0])
    np.testing.assert_array_equal(gin, [[1.0]])


def test_he_uniform_bounds():
    rng = np.random.default_rng(0)
    layer = he_uniform(rng, 50, 24)
    limit = math.sqrt(6 / 24)
    assert layer.weights.shape == (50, 24)
    assert np.abs(layer.weights).max() <= limit
    assert np.abs(layer.weights).max() > 0.9 * limit
    assert not layer.bias.any()
    assert layer.weights.dtype == np.float32


def test_weight_file_round_trip(tmp_path):
    net = MLP.init([4, 6, 3], seed=1)
    path = tmp_path / "w.dfgw"
    save_weights(path, net.layers)
    back = load_weights(path)
    assert [l.activation for l in back] == ["relu", "identity"]
    for a, b in zip(net.layers, back):
        np.testing.assert_array_equal(a.weights, b.weights)
        np.testing.assert_array_equal(a.bias, b.bias)
    raw = path.read_bytes()
    assert raw[:4] == b"DFGW"
    assert len(raw) == 12 + 2 * 9 + 4 * (6 * 4 + 6 + 3 * 6 + 3)


def test_weight_file_rejects_garbage(tmp_path):
    path = tmp_path / "w.dfgw"
    path.write_bytes(b"XXXX" + bytes(8))
    with pytest.raises(ValueError, match="magic"):
        load_weights(path)
    save_weights(path, MLP.init([2, 2], seed=0).layers)
    path.write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(ValueError, match="trailing"):
        load_weights(path)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=8), st.data())
def test_loss_gradient_sums_to_zero(logits, data):
    label = data.draw(st.integers(0, len(logits) - 1))
    loss, grad = loss_and_grad(LossSpec(), np.array(logits), label)
    assert loss >= 0
    assert abs(grad.sum()) < 1e-9
    assert grad[label] <= 0
